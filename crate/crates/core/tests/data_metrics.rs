use std::collections::HashSet;
use std::path::{Path, PathBuf};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stanet::data::{
    encode_pgm, gen_synthetic, load_dataset, load_dataset_at, split_dataset, Dataset, Source,
};
use stanet::metrics::{confusion, metrics, ConfusionMatrix};
use stanet::tensor::write_rt01;
use stanet::{Error, Tensor};

fn gray_ppm(w: usize, h: usize, v: u8) -> Vec<u8> {
    let mut b = format!("P6\n{w} {h}\n255\n").into_bytes();
    b.extend(std::iter::repeat_n(v, w * h * 3));
    b
}

fn write(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

fn source_path(ds: &Dataset, i: usize) -> PathBuf {
    match &ds.items[i].source {
        Source::File(p) => p.clone(),
        Source::Memory(_) => panic!("expected a file-backed item"),
    }
}

#[test]
fn mid_gray_ppm_normalizes_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("only/a.ppm"), &gray_ppm(10, 6, 128));
    write(&dir.path().join("other/b.ppm"), &gray_ppm(3, 3, 0));
    let ds = load_dataset(dir.path()).unwrap();
    let img = ds.image(0).unwrap();
    assert_eq!(img.dims(), [3, 224, 224]);
    let expected: f32 = (128.0 / 255.0 - 0.5) / 0.5;
    assert!((expected - 0.0039).abs() < 1e-4);
    assert!(img.data().iter().all(|v| (v - expected).abs() < 1e-6));
    assert!(ds.image(1).unwrap().data().iter().all(|&v| v == -1.0));
}

#[test]
fn rt01_images_pass_through_unresized() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn(&[3, 224, 224], |i| ((i * 37) % 101) as f32 / 100.0);
    let mut bytes = Vec::new();
    write_rt01(&t, &mut bytes).unwrap();
    write(&dir.path().join("x/img.rt"), &bytes);
    write(&dir.path().join("y/img.ppm"), &gray_ppm(4, 4, 9));
    let ds = load_dataset(dir.path()).unwrap();
    let img = ds.image(0).unwrap();
    for (a, b) in img.data().iter().zip(t.data()) {
        assert_eq!(*a, (b - 0.5) / 0.5);
    }
}

#[test]
fn grayscale_pgm_replicates_channels() {
    let dir = tempfile::tempdir().unwrap();
    let plane: Vec<f32> = (0..64).map(|i| i as f32 / 63.0).collect();
    write(&dir.path().join("a/g.pgm"), &encode_pgm(&plane, 8, 8));
    write(&dir.path().join("b/g.pgm"), &encode_pgm(&plane, 8, 8));
    let ds = load_dataset_at(dir.path(), 8).unwrap();
    let img = ds.image(0).unwrap();
    let d = img.data();
    assert_eq!(d[..64], d[64..128]);
    assert_eq!(d[..64], d[128..]);
}

#[test]
fn loader_errors_are_distinct_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("a/ok.ppm"), &gray_ppm(2, 2, 1));
    write(&dir.path().join("a/photo.jpg"), b"\xff\xd8");
    match load_dataset(dir.path()) {
        Err(Error::UnsupportedFormat(p)) => assert!(p.ends_with("photo.jpg")),
        other => panic!("{other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("a/bad.ppm"), b"P3\n2 2\n255\n");
    match load_dataset(dir.path()) {
        Err(e @ Error::CorruptHeader { .. }) => assert!(e.to_string().contains("bad.ppm")),
        other => panic!("{other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("a/ok.ppm"), &gray_ppm(2, 2, 1));
    std::fs::create_dir_all(dir.path().join("b")).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::EmptyClass(p)) => assert!(p.ends_with("b")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn twenty_two_class_folders_give_twenty_two_sorted_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut names: Vec<String> = (0..22)
        .map(|i| format!("class_{:02}", (i * 7) % 22))
        .collect();
    for n in &names {
        write(&dir.path().join(n).join("0.ppm"), &gray_ppm(2, 2, 3));
    }
    write(&dir.path().join(".hidden/0.ppm"), &gray_ppm(2, 2, 3));
    write(&dir.path().join("class_00/.DS_Store"), b"junk");
    let ds = load_dataset(dir.path()).unwrap();
    names.sort();
    assert_eq!(ds.classes(), 22);
    assert_eq!(ds.class_names, names);
    for (i, item) in ds.items.iter().enumerate() {
        let p = source_path(&ds, i);
        let parent = p.parent().unwrap().file_name().unwrap().to_str().unwrap();
        assert_eq!(ds.class_names[item.label], parent);
    }
}

fn labelled(counts: &[usize]) -> Dataset {
    let mut items = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for j in 0..n {
            items.push(stanet::data::Item {
                source: Source::File(PathBuf::from(format!("{label}/{j}.ppm"))),
                label,
            });
        }
    }
    Dataset {
        items,
        class_names: (0..counts.len()).map(|c| c.to_string()).collect(),
        resolution: 224,
    }
}

fn keys(ds: &Dataset) -> Vec<PathBuf> {
    (0..ds.len()).map(|i| source_path(ds, i)).collect()
}

#[test]
fn ten_per_class_split_six_two_two() {
    let ds = labelled(&[10, 10, 10]);
    let (tr, va, te) = split_dataset(&ds, (0.6, 0.2, 0.2), 5).unwrap();
    for c in 0..3 {
        let count = |d: &Dataset| d.labels().iter().filter(|&&l| l == c).count();
        assert_eq!((count(&tr), count(&va), count(&te)), (6, 2, 2));
    }
    let again = split_dataset(&ds, (0.6, 0.2, 0.2), 5).unwrap();
    assert_eq!(keys(&again.0), keys(&tr));
    let other = split_dataset(&ds, (0.6, 0.2, 0.2), 6).unwrap();
    assert_ne!(keys(&other.0), keys(&tr));
    assert!(split_dataset(&ds, (0.6, 0.3, 0.2), 5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_every_class(
        counts in prop::collection::vec(1usize..40, 2..6),
        seed in any::<u64>(),
        a in 0.3f64..0.8,
        b_frac in 0.0f64..1.0,
    ) {
        let b = (1.0 - a) * b_frac;
        let ratios = (a, b, 1.0 - a - b);
        let ds = labelled(&counts);
        let (tr, va, te) = split_dataset(&ds, ratios, seed).unwrap();
        let parts: Vec<HashSet<PathBuf>> =
            [&tr, &va, &te].iter().map(|d| keys(d).into_iter().collect()).collect();
        prop_assert_eq!(parts.iter().map(HashSet::len).sum::<usize>(), ds.len());
        for i in 0..3 {
            for j in i + 1..3 {
                prop_assert!(parts[i].is_disjoint(&parts[j]));
            }
        }
        let all: HashSet<PathBuf> = keys(&ds).into_iter().collect();
        let union: HashSet<PathBuf> = parts.iter().flatten().cloned().collect();
        prop_assert_eq!(union, all);
        for (c, &n) in counts.iter().enumerate() {
            let in_train = tr.labels().iter().filter(|&&l| l == c).count() as f64;
            prop_assert!((in_train - n as f64 * a).abs() <= 0.5 + 1e-9);
        }
    }
}

#[test]
fn synthetic_set_is_balanced_and_seeded() {
    let a = gen_synthetic(4, 6, 32, 1).unwrap();
    let b = gen_synthetic(4, 6, 32, 1).unwrap();
    let c = gen_synthetic(4, 6, 32, 2).unwrap();
    assert_eq!(a.len(), 24);
    for k in 0..4 {
        assert_eq!(a.labels().iter().filter(|&&l| l == k).count(), 6);
    }
    assert_eq!(a, b);
    assert_eq!(a.labels(), c.labels());
    assert_ne!(a.image(0).unwrap(), c.image(0).unwrap());
    let names: HashSet<&String> = a.class_names.iter().collect();
    assert_eq!(names.len(), 4);
    let mut sorted = a.class_names.clone();
    sorted.sort();
    assert_eq!(sorted, a.class_names);
}

#[test]
fn synthetic_tree_reloads_with_same_labels() {
    let ds = gen_synthetic(3, 2, 16, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write_ppm_tree(dir.path()).unwrap();
    let back = load_dataset_at(dir.path(), 16).unwrap();
    assert_eq!(back.class_names, ds.class_names);
    assert_eq!(back.labels(), ds.labels());
    for i in 0..ds.len() {
        let diff = back.image(i).unwrap().max_abs_diff(&ds.image(i).unwrap());
        assert!(diff <= 1.0 / 255.0 + 1e-5, "item {i}: {diff}");
    }
}

#[test]
fn confusion_hand_tally() {
    let m = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
    assert_eq!(m.rows(), vec![vec![1, 0], vec![1, 2]]);
    assert_eq!(m.accuracy(), 0.75);
    assert!(matches!(
        confusion(&[0], &[0, 1], 2),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        confusion(&[2], &[0], 2),
        Err(Error::LabelOutOfRange {
            label: 2,
            classes: 2
        })
    ));
}

#[test]
fn metrics_hand_case() {
    let m = ConfusionMatrix::from_rows(&[vec![5, 5], vec![0, 10]]).unwrap();
    let r = metrics(&m);
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.per_class[0].precision, 1.0);
    assert_eq!(r.per_class[0].recall, 0.5);
    assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
    assert!((r.per_class[1].precision - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.per_class[1].recall, 1.0);
    assert!((r.per_class[1].f1 - 0.8).abs() < 1e-12);
    assert!((r.macro_f1 - 11.0 / 15.0).abs() < 1e-12);
}

#[test]
fn empty_classes_score_zero() {
    let m = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 0, 0], vec![1, 0, 0]]).unwrap();
    let r = metrics(&m);
    assert_eq!(r.per_class[1].precision, 0.0);
    assert_eq!(r.per_class[1].recall, 0.0);
    assert_eq!(r.per_class[1].f1, 0.0);
    assert_eq!(r.per_class[2].precision, 0.0);
    assert_eq!(metrics(&ConfusionMatrix::new(2)).accuracy, 0.0);
}

/// Per-sample counting, independent of the matrix arithmetic.
fn brute_force(samples: &[(usize, usize)], k: usize) -> (f64, Vec<(f64, f64, f64)>, f64) {
    let correct = samples.iter().filter(|(t, p)| t == p).count();
    let acc = if samples.is_empty() {
        0.0
    } else {
        correct as f64 / samples.len() as f64
    };
    let mut per = Vec::new();
    for c in 0..k {
        let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
        for &(t, p) in samples {
            if t == c && p == c {
                tp += 1.0;
            } else if p == c {
                fp += 1.0;
            } else if t == c {
                fnn += 1.0;
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let f1 = if prec + rec > 0.0 {
            2.0 * prec * rec / (prec + rec)
        } else {
            0.0
        };
        per.push((prec, rec, f1));
    }
    let macro_f1 = per.iter().map(|x| x.2).sum::<f64>() / k as f64;
    (acc, per, macro_f1)
}

#[test]
fn thousand_random_matrices_match_per_sample_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let k = rng.gen_range(2..9);
        let n = rng.gen_range(0..200);
        let samples: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.gen_range(0..k), rng.gen_range(0..k)))
            .collect();
        let (t, p): (Vec<usize>, Vec<usize>) = samples.iter().copied().unzip();
        let r = metrics(&confusion(&p, &t, k).unwrap());
        let (acc, per, macro_f1) = brute_force(&samples, k);
        assert!((r.accuracy - acc).abs() < 1e-9);
        assert!((r.macro_f1 - macro_f1).abs() < 1e-9);
        for (c, (prec, rec, f1)) in per.iter().enumerate() {
            assert!((r.per_class[c].precision - prec).abs() < 1e-9);
            assert!((r.per_class[c].recall - rec).abs() < 1e-9);
            assert!((r.per_class[c].f1 - f1).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_relabel_invariant(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 0..120),
        perm_seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let k = 5;
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let r = metrics(&confusion(&p, &t, k).unwrap());
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let t2: Vec<usize> = t.iter().map(|&x| perm[x]).collect();
        let p2: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
        let r2 = metrics(&confusion(&p2, &t2, k).unwrap());
        prop_assert!((r.accuracy - r2.accuracy).abs() < 1e-12);
        prop_assert!((r.macro_f1 - r2.macro_f1).abs() < 1e-12);
        for (c, m) in r.per_class.iter().enumerate() {
            prop_assert_eq!(m, &r2.per_class[perm[c]]);
            for v in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn csv_layouts() {
    let m = ConfusionMatrix::from_rows(&[vec![5, 5], vec![0, 10]]).unwrap();
    let names = vec!["cat".to_string(), "dog".to_string()];
    assert_eq!(m.to_csv(&names), "true\\pred,cat,dog\ncat,5,5\ndog,0,10\n");
    let csv = metrics(&m).to_csv(&names);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class,precision,recall,f1,support");
    assert_eq!(lines[1], "cat,1.000000,0.500000,0.666667,10");
    assert_eq!(lines[3], "macro,0.833333,0.750000,0.733333,20");
    assert_eq!(lines[4], "accuracy,,,0.750000,20");
}
