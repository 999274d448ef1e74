mod common;

use std::fs;

use alhp::harness::dataset::{load_manifest, write_manifest, Record, Split};
use alhp::harness::eval::{average_precision, evaluate_items, Item};
use alhp::harness::report::{build_report, read_run, render_csv, REPORT_HEADER};
use alhp::harness::synth::{gen_data, SynthConfig};
use alhp::trainer::metrics::{read_metrics, METRICS_FILE};
use alhp::trainer::{run, Mode};
use alhp::Error;
use common::{brute_ap, rng, tiny_config, tiny_data};
use image::RgbImage;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tempfile::TempDir;

fn synth(places: usize, variants: usize, seed: u64) -> (TempDir, alhp::harness::PlaceDataset) {
    let dir = TempDir::new().unwrap();
    let ds = gen_data(
        &SynthConfig {
            places,
            variants,
            resolution: 48,
            seed,
        },
        dir.path(),
    )
    .unwrap();
    (dir, ds)
}

#[test]
fn gen_data_counts() {
    let (dir, ds) = synth(64, 5, 3);
    assert_eq!(ds.queries().len(), 64);
    assert_eq!(ds.database().len(), 256);
    let text = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 320);
}

#[test]
fn gen_data_is_deterministic() {
    let (a, _) = synth(6, 3, 9);
    let (b, _) = synth(6, 3, 9);
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 19);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn gen_data_geometry() {
    let (_dir, ds) = synth(20, 4, 5);
    for (i, a) in ds.records.iter().enumerate() {
        for b in &ds.records[i + 1..] {
            let d = a.distance(b);
            if a.place_id == b.place_id {
                assert!(d <= 0.5, "same place {} at {d}", a.place_id);
            } else {
                assert!(d >= 3.0, "places {} and {} at {d}", a.place_id, b.place_id);
            }
        }
    }
    for &q in ds.queries() {
        assert_eq!(ds.positives_of(q).len(), 3);
    }
}

fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
    let s: f64 = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    s / a.as_raw().len() as f64
}

#[test]
fn variants_of_a_place_are_closer_in_pixels_than_other_places() {
    let (_dir, ds) = synth(32, 5, 17);
    let images = ds.load_images(48).unwrap();
    let mut r = rng(1);
    let n = ds.records.len();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    while intra.len() < 1000 || inter.len() < 1000 {
        let (i, j) = (r.random_range(0..n), r.random_range(0..n));
        if i == j {
            continue;
        }
        let same = ds.records[i].place_id == ds.records[j].place_id;
        let bucket = if same { &mut intra } else { &mut inter };
        if bucket.len() < 1000 {
            bucket.push(mse(&images[i], &images[j]));
        }
        if !same && inter.len() == 1000 && intra.len() < 1000 {
            let p = r.random_range(0..32usize);
            let vs: Vec<usize> = (0..n).filter(|&k| ds.records[k].place_id == p).collect();
            let (a, b) = (vs[0], vs[r.random_range(1..vs.len())]);
            intra.push(mse(&images[a], &images[b]));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&intra) < mean(&inter), "intra {} inter {}", mean(&intra), mean(&inter));
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, b"x").unwrap();
    let cfg = SynthConfig {
        places: 1,
        variants: 2,
        resolution: 16,
        seed: 0,
    };
    assert!(gen_data(&cfg, &file.join("sub")).is_err());
}

fn rec(path: &str, place: usize, x: f64, split: Split) -> Record {
    Record {
        path: path.into(),
        place_id: place,
        x,
        y: 0.0,
        split,
    }
}

#[test]
fn well_formed_manifest_loads() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("manifest.csv");
    let rows = vec![
        rec("a.png", 0, 0.0, Split::Query),
        rec("b.png", 0, 0.2, Split::Database),
        rec("c.png", 1, 5.0, Split::Query),
        rec("d.png", 1, 5.1, Split::Database),
        rec("e.png", 2, 9.0, Split::Database),
    ];
    write_manifest(&p, &rows).unwrap();
    let ds = load_manifest(dir.path(), 1.5).unwrap();
    assert_eq!(ds.records, rows);
    assert_eq!(ds.queries(), &[0, 2]);
}

#[test]
fn missing_split_column_is_named() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("manifest.csv");
    fs::write(&p, "path,place_id,x,y\na.png,0,0,0\n").unwrap();
    let err = load_manifest(&p, 1.0).unwrap_err().to_string();
    assert!(err.contains("split"), "{err}");
}

#[test]
fn bad_rows_name_their_row() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("m.csv");
    fs::write(&p, "path,place_id,x,y,split\na.png,0,0,0,query\nb.png,0,zero,0,database\n").unwrap();
    let err = load_manifest(&p, 1.0).unwrap_err().to_string();
    assert!(err.contains("row 3") && err.contains('x'), "{err}");
    fs::write(&p, "path,place_id,x,y,split\na.png,0,0,0,train\n").unwrap();
    let err = load_manifest(&p, 1.0).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
    assert!(matches!(load_manifest(&dir.path().join("none.csv"), 1.0), Err(Error::Manifest { .. })));
}

#[test]
fn query_exactly_at_the_radius_has_a_positive() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("manifest.csv");
    write_manifest(&p, &[rec("q.png", 0, 0.0, Split::Query), rec("d.png", 0, 1.5, Split::Database)]).unwrap();
    let ds = load_manifest(&p, 1.5).unwrap();
    assert_eq!(ds.positives_of(0), vec![1]);
    assert_eq!(ds.evaluable_queries(), vec![0]);
    let ds = load_manifest(&p, 1.4999).unwrap();
    assert!(ds.evaluable_queries().is_empty());
}

fn items<'a>(coords: &[(f64, f64)], descs: &'a [Vec<f64>]) -> Vec<Item<'a, f64>> {
    coords.iter().zip(descs).map(|(&(x, y), d)| Item { x, y, global: d }).collect()
}

#[test]
fn exact_copies_retrieve_at_rank_one() {
    let mut r = rng(3);
    let coords: Vec<(f64, f64)> = (0..12).map(|i| (i as f64 * 4.0, 0.0)).collect();
    let descs: Vec<Vec<f64>> = (0..12).map(|_| (0..8).map(|_| r.random::<f64>()).collect()).collect();
    let q = items(&coords, &descs);
    let report = evaluate_items(&q, &q, &[1, 5, 10], 1.5).unwrap();
    assert_eq!(report.recalls, vec![1.0, 1.0, 1.0]);
    assert_eq!(report.map, 1.0);
}

#[test]
fn hand_computed_average_precision() {
    assert!((average_precision(&[true, false, true, false, false]) - 5.0 / 6.0).abs() < 1e-15);
    // Same list through the ranking path: database at increasing descriptor distance.
    let qd = vec![vec![0.0]];
    let dd: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64]).collect();
    let dc = [(0.0, 0.0), (9.0, 0.0), (0.5, 0.0), (9.0, 0.0), (9.0, 0.0)];
    let r = evaluate_items(&items(&[(0.0, 0.0)], &qd), &items(&dc, &dd), &[1, 5], 1.0).unwrap();
    assert!((r.map - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(r.first_correct, vec![Some(1)]);
}

#[test]
fn queries_without_positives_are_excluded() {
    let qd = vec![vec![0.0], vec![1.0]];
    let dd = vec![vec![0.1], vec![5.0]];
    let qc = [(0.0, 0.0), (100.0, 0.0)];
    let dc = [(0.0, 0.0), (50.0, 0.0)];
    let r = evaluate_items(&items(&qc, &qd), &items(&dc, &dd), &[1], 1.0).unwrap();
    assert_eq!((r.evaluated, r.excluded), (1, 1));
    assert_eq!(r.recalls, vec![1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ap_matches_brute_force(rel in prop::collection::vec(any::<bool>(), 1..=10)) {
        prop_assert_eq!(average_precision(&rel), brute_ap(&rel));
    }

    #[test]
    fn recall_is_monotone_and_order_free(seed in any::<u64>(), nq in 1usize..8, nd in 2usize..20) {
        let mut r = rng(seed);
        let pt = |r: &mut rand_chacha::ChaCha8Rng| (r.random_range(0.0..10.0), r.random_range(0.0..10.0));
        let qc: Vec<_> = (0..nq).map(|_| pt(&mut r)).collect();
        let dc: Vec<_> = (0..nd).map(|_| pt(&mut r)).collect();
        let qd: Vec<Vec<f64>> = (0..nq).map(|_| (0..4).map(|_| r.random()).collect()).collect();
        let dd: Vec<Vec<f64>> = (0..nd).map(|_| (0..4).map(|_| r.random()).collect()).collect();
        let Ok(a) = evaluate_items(&items(&qc, &qd), &items(&dc, &dd), &[1, 5, 10], 3.0) else {
            return Ok(());
        };
        prop_assert!(a.recalls.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&a.map));

        let mut perm: Vec<usize> = (0..nd).collect();
        perm.shuffle(&mut r);
        let dc2: Vec<_> = perm.iter().map(|&i| dc[i]).collect();
        let dd2: Vec<_> = perm.iter().map(|&i| dd[i].clone()).collect();
        let b = evaluate_items(&items(&qc, &qd), &items(&dc2, &dd2), &[1, 5, 10], 3.0).unwrap();
        prop_assert_eq!(&a.recalls, &b.recalls);
        prop_assert!((a.map - b.map).abs() < 1e-12);
    }
}

#[test]
fn report_has_one_row_per_run_and_recomputes_loss() {
    let data = TempDir::new().unwrap();
    tiny_data(data.path(), 5, 3, 32, 21);
    let runs = TempDir::new().unwrap();
    for mode in Mode::ALL {
        run::<f32>(tiny_config(data.path(), mode, 1), Some(&runs.path().join(mode.name()))).unwrap();
    }
    fs::create_dir(runs.path().join("broken")).unwrap();
    let (rows, warnings) = build_report(runs.path()).unwrap();
    assert_eq!(warnings.len(), 1);
    let mut modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    modes.sort();
    assert_eq!(modes, ["adversarial", "baseline", "fixed", "random"]);

    let csv = render_csv(&rows);
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>().join(","), REPORT_HEADER);
    for rec in reader.records() {
        let rec = rec.unwrap();
        let steps = read_metrics(&runs.path().join(&rec[0]).join(METRICS_FILE)).unwrap();
        let last = steps.last().unwrap();
        let vals: Vec<f64> = steps
            .iter()
            .filter(|s| s.generation == last.generation && s.epoch == last.epoch)
            .map(|s| s.policy_losses.iter().flatten().sum::<f64>() / s.policy_losses.len() as f64)
            .collect();
        let expect = vals.iter().sum::<f64>() / vals.len() as f64;
        let got: f64 = rec[6].parse().unwrap();
        assert!((got - expect).abs() < 1e-6, "{} vs {expect}", &rec[6]);
    }
    assert!(read_run(&runs.path().join("broken")).is_err());
}
