use std::collections::HashSet;
use std::fs;
use std::path::Path;

use forgeloc::data::dataset::{load_split, write_dataset, DatasetSpec};
use forgeloc::data::forge::{
    diffusion_fill, generate_copy_move, generate_sample, generate_splice, MAX_FRACTION, MIN_FRACTION,
};
use forgeloc::data::manifest::{DatasetManifest, Split};
use forgeloc::data::procedural::{photograph, NoiseProfile};
use forgeloc::data::{ForgeryKind, Image, Mask};
use forgeloc::seed::rng_for;

#[test]
fn splice_fraction_stays_in_bounds_over_1000_seeds() {
    for seed in 0..1000 {
        let s = generate_sample(ForgeryKind::Splice, 32, 32, seed).unwrap();
        let f = s.mask.fraction();
        assert!(f > MIN_FRACTION && f < MAX_FRACTION, "seed {seed}: fraction {f}");
        assert!(s.mask.is_binary());
    }
}

fn changed_pixels(a: &Image, b: &Image) -> Mask {
    let mut m = Mask::new(a.height, a.width);
    for y in 0..a.height {
        for x in 0..a.width {
            m.set(y, x, (0..3).any(|c| a.get(c, y, x) != b.get(c, y, x)));
        }
    }
    m
}

#[test]
fn mask_marks_exactly_the_changed_pixels() {
    for seed in 0..50 {
        let mut rng = rng_for(seed, "changed");
        let base = photograph(48, 48, NoiseProfile::BASE, &mut rng);
        let donor = photograph(48, 48, NoiseProfile::DONOR, &mut rng);
        let splice = generate_splice(&base, &donor, false, &mut rng).unwrap();
        assert_eq!(changed_pixels(&base, &splice.image), splice.mask, "splice seed {seed}");
        let copy = generate_copy_move(&base, &mut rng).unwrap();
        assert_eq!(changed_pixels(&base, &copy.image), copy.mask, "copy-move seed {seed}");
    }
}

#[test]
fn diffusion_fill_converges_on_large_regions() {
    let mut rng = rng_for(1, "fill");
    let base = photograph(96, 96, NoiseProfile::BASE, &mut rng);
    let square = Mask {
        height: 96,
        width: 96,
        data: (0..96 * 96)
            .map(|i| {
                let (y, x) = (i / 96, i % 96);
                u8::from((16..80).contains(&y) && (16..80).contains(&x))
            })
            .collect(),
    };
    let disc = Mask {
        height: 96,
        width: 96,
        data: (0..96 * 96)
            .map(|i| {
                let (y, x) = ((i / 96) as f64 - 47.5, (i % 96) as f64 - 47.5);
                u8::from(y * y + x * x <= 32.0 * 32.0)
            })
            .collect(),
    };
    for region in [square, disc] {
        let mut img = base.clone();
        let stats = diffusion_fill(&mut img, &region, 200, 1e-4);
        assert!(stats.sweeps <= 200);
        assert!(stats.last_change < 1e-4, "{stats:?}");
        for y in 0..96 {
            for x in 0..96 {
                if !region.get(y, x) {
                    for c in 0..3 {
                        assert_eq!(img.get(c, y, x), base.get(c, y, x));
                    }
                }
            }
        }
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        let mut names: Vec<_> = fs::read_dir(&d)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            out.push((
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            ));
        }
    }
    out
}

#[test]
fn written_datasets_are_byte_identical_and_splits_disjoint() {
    let spec = DatasetSpec::new(32, 32, 6, 3, 77);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&spec, a.path()).unwrap();
    write_dataset(&spec, b.path()).unwrap();
    let tree = read_tree(a.path());
    assert_eq!(tree.len(), 1 + 2 * 9);
    assert_eq!(tree, read_tree(b.path()));

    let manifest = DatasetManifest::load(&a.path().join("manifest.tsv")).unwrap();
    let train: HashSet<_> = manifest.split(Split::Train).map(|e| e.image_path.clone()).collect();
    let test: HashSet<_> = manifest.split(Split::Test).map(|e| e.image_path.clone()).collect();
    assert_eq!((train.len(), test.len()), (6, 3));
    assert!(train.is_disjoint(&test));

    let (loaded, skipped) = load_split(&manifest, Split::Test, (32, 32)).unwrap();
    assert_eq!((loaded.len(), skipped), (3, 0));
    let regenerated = generate_sample(spec.entry(6).1, 32, 32, spec.entry(6).0).unwrap();
    assert_eq!(loaded[0].mask, regenerated.mask);
    for (x, y) in loaded[0].image.data.iter().zip(&regenerated.image.data) {
        assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
    }
}
