use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mifl_core::data::{load_dataset, split_train_test, synth_generate, Content, Dataset, Record, SynthConfig, View};
use mifl_core::eval::{cmc, euclidean_baseline, single_shot_split};
use mifl_core::features::{ImageRgb, StripeDescriptor};

fn write_ppm(dir: &Path, name: &str, shade: u8) {
    let img = ImageRgb::from_fn(2, 6, |x, y| [shade, (x * 40) as u8, (y * 40) as u8]).unwrap();
    fs::write(dir.join(name), img.to_ppm()).unwrap();
}

#[test]
fn viper_shaped_directory() {
    let t = tempfile::tempdir().unwrap();
    for dir in ["view_a", "view_b"] {
        let d = t.path().join(dir);
        fs::create_dir_all(&d).unwrap();
        for i in 0..632 {
            write_ppm(&d, &format!("{i:03}_0.ppm"), (i % 256) as u8);
        }
    }
    let d = load_dataset(t.path()).unwrap();
    assert_eq!(d.len(), 1264);
    assert_eq!(d.identities().len(), 632);
    assert_eq!(d.records.iter().filter(|r| r.view == View::A).count(), 632);

    for p in [316, 100, 200, 432, 532] {
        let (tr, te) = split_train_test(&d, p, 3).unwrap();
        assert_eq!(tr.identities().len(), p);
        assert_eq!(te.identities().len(), 632 - p);
        assert_eq!(tr.len() + te.len(), 1264);
    }
    let s = single_shot_split(&d, 3).unwrap();
    assert_eq!((s.probe.len(), s.gallery.len()), (632, 632));
    assert!(split_train_test(&d, 0, 3).is_err());
}

fn stripes() -> Content {
    let mut v = vec![0.0; 430];
    v[0] = 1.0;
    v[59] = 1.0;
    for b in 0..8 {
        v[302 + 16 * b] = 1.0;
    }
    Content::Stripes(vec![StripeDescriptor::new(v).unwrap(); 6])
}

#[test]
fn caviar_shaped_split() {
    // 72 identities with several images per view; 22 appear in one view only
    let mut records = Vec::new();
    for i in 0..72 {
        let id = format!("{i:04}");
        let views: &[View] = match i {
            0..50 => &[View::A, View::B],
            50..61 => &[View::A],
            _ => &[View::B],
        };
        for &view in views {
            for k in 0..5 {
                records.push(Record {
                    identity: id.clone(),
                    view,
                    image_id: format!("{}/{id}_{k}", view.as_str()),
                    content: stripes(),
                });
            }
        }
    }
    let d = Dataset::new(records).unwrap();
    let (tr, te) = split_train_test(&d, 36, 11).unwrap();
    let (a, b): (BTreeSet<_>, BTreeSet<_>) = (
        tr.identities().into_iter().collect(),
        te.identities().into_iter().collect(),
    );
    assert_eq!((a.len(), b.len()), (36, 36));
    assert!(a.is_disjoint(&b));

    let s = single_shot_split(&d, 11).unwrap();
    assert_eq!(s.identities.len(), 50);
    assert_eq!(s.excluded.len(), 22);
    let s_tr = single_shot_split(&tr, 11).unwrap();
    let s_te = single_shot_split(&te, 11).unwrap();
    assert_eq!(s_tr.identities.len() + s_te.identities.len(), 50);
    assert_eq!(s_tr.excluded.len() + s_te.excluded.len(), 22);
}

#[test]
fn synthetic_baseline_beats_chance() {
    let d = synth_generate(&SynthConfig::default()).unwrap();
    let s = single_shot_split(&d, 0).unwrap();
    let feats = |rs: &[Record]| rs.iter().map(|r| r.concatenated().unwrap()).collect::<Vec<_>>();
    let scores = euclidean_baseline(
        &feats(&s.probe),
        s.identities.clone(),
        &feats(&s.gallery),
        s.identities.clone(),
    )
    .unwrap();
    let rank1 = cmc(&scores).unwrap().at_rank(1);
    assert!(rank1 > 1.0 / 64.0, "rank-1 {rank1}");
    assert_eq!(rank1, 17.0 / 64.0);
}

#[test]
fn synthetic_is_reproducible() {
    let cfg = SynthConfig {
        n_identities: 8,
        seed: 42,
        ..SynthConfig::default()
    };
    assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    let other = SynthConfig {
        seed: 43,
        ..cfg.clone()
    };
    assert_ne!(synth_generate(&cfg).unwrap(), synth_generate(&other).unwrap());
}
