use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::Error;

fn span(lo: f64, hi: f64, height: f64) -> Block {
    Block::new((lo + hi) / 2.0, hi - lo, height)
}

/// Top-down recursion: each level folds one block into the running mass and moment.
fn com_profile_recursive(blocks: &[Block]) -> Vec<f64> {
    fn go(blocks: &[Block], i: usize, out: &mut Vec<f64>) -> (f64, f64) {
        let b = &blocks[i];
        let (mass, moment) = if i + 1 == blocks.len() {
            (0.0, 0.0)
        } else {
            go(blocks, i + 1, out)
        };
        let (mass, moment) = (mass + b.mass(), moment + b.mass() * b.center_x);
        out[i] = moment / mass;
        (mass, moment)
    }
    let mut out = vec![0.0; blocks.len()];
    go(blocks, 0, &mut out);
    out
}

fn random_tower(rng: &mut ChaCha8Rng) -> Vec<Block> {
    let n = rng.random_range(2..=8);
    let mut blocks = vec![Block::new(0.0, rng.random_range(0.5..3.0), rng.random_range(0.5..1.5))];
    for _ in 1..n {
        let below = *blocks.last().unwrap();
        let w = rng.random_range(0.5..3.0);
        let x = below.center_x + rng.random_range(-0.49..0.49) * (below.width + w);
        blocks.push(Block::new(x, w, rng.random_range(0.5..1.5)));
    }
    blocks
}

#[test]
fn overhanging_pair_is_unstable() {
    let t = TowerScenario::from_blocks(vec![span(0.0, 2.0, 1.0), span(1.5, 3.5, 1.0)]).unwrap();
    assert!(t.y_g() && t.y_l());
    assert_eq!(t.category, Category::D);
    assert_eq!(t.violation_class, 1);
}

#[test]
fn counterbalanced_tower_is_category_c() {
    let blocks = vec![span(0.0, 4.0, 1.0), span(3.0, 6.0, 1.0), span(3.0, 4.0, 4.0)];
    assert!((com_above(&blocks, 1) - 27.5 / 7.0).abs() < 1e-12);
    assert!((com_above(&blocks, 1) - 3.9286).abs() < 1e-4);
    let t = TowerScenario::from_blocks(blocks).unwrap();
    assert_eq!(t.global_violations, vec![false, false]);
    assert_eq!(t.local_violations, vec![true, false]);
    assert_eq!(t.category, Category::C);
    assert_eq!(t.violation_class, 0);
}

#[test]
fn aligned_tower_is_category_a() {
    let blocks: Vec<Block> = (0..4).map(|_| Block::new(0.0, 2.0, 1.0)).collect();
    let t = TowerScenario::from_blocks(blocks).unwrap();
    assert_eq!(t.category, Category::A);
    assert!(!t.y_g() && !t.y_l());
}

#[test]
fn staircase_violates_only_globally() {
    // every block sits on its support's middle third but the stack leans past the base
    let blocks = vec![
        span(0.0, 2.0, 1.0),
        span(0.6, 2.6, 1.0),
        span(1.2, 3.2, 1.0),
        span(1.8, 3.8, 1.0),
    ];
    let t = TowerScenario::from_blocks(blocks).unwrap();
    assert_eq!(t.local_violations, vec![false, false, false]);
    assert_eq!(t.global_violations, vec![true, false, false]);
    assert_eq!(t.category, Category::B);
}

#[test]
fn boundary_counts_as_unstable() {
    let blocks = vec![span(0.0, 2.0, 1.0), span(1.0, 3.0, 1.0)];
    // the upper centre sits exactly on the contact edge
    assert_eq!(global_violations(&blocks).unwrap(), vec![true]);
    assert_eq!(local_violations(&blocks).unwrap(), vec![true]);
    assert!(contact_interval(&span(0.0, 1.0, 1.0), &span(1.0, 2.0, 1.0)).is_none());
    assert!(TowerScenario::from_blocks(vec![span(0.0, 1.0, 1.0), span(1.0, 2.0, 1.0)]).is_err());
    assert!(TowerScenario::from_blocks(vec![span(0.0, 1.0, 1.0)]).is_err());
}

#[test]
fn mismatched_violation_levels_are_rejected() {
    assert_eq!(categorize(&[true, false], &[false, true]), None);
    assert_eq!(categorize(&[true, true], &[false, true]), None);
    assert_eq!(categorize(&[false, true], &[false, true]), Some(Category::D));
    assert_eq!(violation_interface(&[false, true, true]), 2);
    assert_eq!(violation_interface(&[false, false]), 0);
}

#[test]
fn com_matches_recursive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let blocks = random_tower(&mut rng);
        let oracle = com_profile_recursive(&blocks);
        for i in 1..blocks.len() {
            assert!((com_above(&blocks, i) - oracle[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn identities_on_random_towers() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10_000 {
        let blocks = random_tower(&mut rng);
        let g = global_violations(&blocks).unwrap();
        let l = local_violations(&blocks).unwrap();
        // the topmost interface carries only the top block, so both cues coincide
        assert_eq!(g.last(), l.last());
        if blocks.len() == 2 {
            assert_eq!(g, l);
        }
    }
}

#[test]
fn two_block_towers_cannot_split_cues() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for c in [Category::B, Category::C] {
        assert!(matches!(
            generate_scenario(c, 2, &GeneratorConfig::default(), &mut rng),
            Err(Error::Config(_))
        ));
    }
    for c in [Category::A, Category::D] {
        let t = generate_scenario(c, 2, &GeneratorConfig::default(), &mut rng).unwrap();
        assert_eq!(t.category, c);
    }
    assert!(generate_scenario(Category::A, 7, &GeneratorConfig::default(), &mut rng).is_err());
}

#[test]
fn generated_towers_honour_category_and_margin() {
    let cfg = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for c in Category::ALL {
        for n in 3..=6 {
            for _ in 0..25 {
                let t = generate_scenario(c, n, &cfg, &mut rng).unwrap();
                assert_eq!(t.category, c);
                assert_eq!(t.n_blocks(), n);
                assert_eq!((t.y_g(), t.y_l()), c.labels());
                assert!(relative_margin(&t.blocks).unwrap() >= cfg.margin);
                assert_eq!(t.violation_class == 0, !t.y_g());
                for w in t.blocks.windows(2) {
                    assert_ne!(w[0].color_index, w[1].color_index);
                }
                rasterize(&t.blocks, 48).unwrap();
            }
        }
    }
}

#[test]
fn exhausted_budget_names_category() {
    let cfg = GeneratorConfig {
        margin: 0.49,
        max_attempts: 500,
    };
    let err = generate_scenario(Category::B, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap_err();
    match &err {
        Error::SamplingExhausted { category, attempts, .. } => {
            assert_eq!(*category, 'B');
            assert_eq!(*attempts, 500);
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("category B"));
}

#[test]
fn raster_rejects_oversized_towers() {
    assert!(rasterize(&[Block::new(0.0, 9.5, 1.0)], 48).is_err());
    let tall: Vec<Block> = (0..10).map(|_| Block::new(0.0, 1.0, 1.0)).collect();
    assert!(rasterize(&tall, 48).is_err());
    assert!(rasterize(&[], 48).is_err());
}

#[test]
fn full_width_block_fills_its_rows() {
    let mut b = Block::new(0.0, WORLD_SIZE, 3.0);
    b.color_index = 2;
    let img = rasterize(&[b], 48).unwrap();
    let rows = 16; // 3 / 9 of 48
    for ch in 0..3 {
        for r in 0..48 {
            for c in 0..48 {
                let v = img.at(&[ch, r, c]);
                if r >= 48 - rows {
                    assert_eq!(v, PALETTE[2][ch]);
                } else {
                    assert_eq!(v, render::BACKGROUND);
                }
            }
        }
    }
}

#[test]
fn coverage_tracks_block_area() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let size = 48;
    let px = size as f64 / WORLD_SIZE;
    for _ in 0..200 {
        let w = rng.random_range(0.5..WORLD_SIZE);
        let h = rng.random_range(0.5..WORLD_SIZE);
        let img = rasterize(&[Block::new(rng.random_range(-3.0..3.0), w, h)], size).unwrap();
        let covered = (0..size * size).filter(|p| img.data()[*p] != render::BACKGROUND).count() as f64;
        let (cw, ch) = (w * px, h * px);
        // rounding each edge moves the extent by at most one pixel per axis
        assert!((covered - cw * ch).abs() <= cw + ch + 1.0, "covered {covered} vs {}", cw * ch);
    }
}

#[test]
fn rgb_bytes_are_interleaved() {
    let mut img = Tensor::zeros(&[3, 2, 2]);
    img.set(&[0, 0, 1], 1.0);
    img.set(&[2, 1, 0], 0.5);
    let bytes = to_rgb_bytes(&img);
    assert_eq!(bytes.len(), 12);
    assert_eq!(bytes[3], 255);
    assert_eq!(bytes[8], 128);
}

fn small_config() -> DatasetConfig {
    DatasetConfig {
        per_category: 10,
        image_size: 24,
        seed: 9,
        ..DatasetConfig::default()
    }
}

#[test]
fn dataset_round_trips_bit_exact() {
    let ds = build_dataset(&small_config()).unwrap();
    assert_eq!(ds.len(), 40);
    assert_eq!(ds.manifest.train.len(), 32);
    assert_eq!(ds.manifest.test.len(), 8);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let header = std::fs::read_to_string(dir.path().join("labels.csv")).unwrap();
    assert!(header.starts_with("index,category,y_G,y_L,violation_class,split,subset\n"));
    let back = TowerDataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    for r in &ds.records {
        assert_eq!((r.y_g, r.y_l), r.category.labels());
        assert_eq!(r.subset, r.category.subset());
    }
}

#[test]
fn dataset_is_deterministic_per_index() {
    let a = build_dataset(&small_config()).unwrap();
    let b = build_dataset(&small_config()).unwrap();
    assert_eq!(a, b);
    let other = build_dataset(&DatasetConfig {
        seed: 10,
        ..small_config()
    })
    .unwrap();
    assert_ne!(a.images, other.images);
    // growing the dataset leaves existing indices in category A untouched
    let bigger = build_dataset(&DatasetConfig {
        per_category: 12,
        ..small_config()
    })
    .unwrap();
    let plane = 24 * 24 * 3;
    assert_eq!(a.images[..10 * plane], bigger.images[..10 * plane]);
}

#[test]
fn load_rejects_truncated_images() {
    let ds = build_dataset(&DatasetConfig {
        per_category: 2,
        ..small_config()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let path = dir.path().join("images.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(TowerDataset::load(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn image_tensor_restores_channels() {
    let ds = build_dataset(&DatasetConfig {
        per_category: 1,
        ..small_config()
    })
    .unwrap();
    let t = ds.image_tensor(&[0, 3]);
    assert_eq!(t.shape(), &[2, 3, 24, 24]);
    let plane = 24 * 24;
    for p in 0..plane {
        for ch in 0..3 {
            assert_eq!(t.data()[3 * plane + ch * plane + p], f64::from(ds.images[3 * 3 * plane + 3 * p + ch]) / 255.0);
        }
    }
}

proptest! {
    #[test]
    fn labels_invariant_under_translation_and_mirror(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = random_tower(&mut rng);
        let g = global_violations(&blocks).ok();
        let l = local_violations(&blocks).ok();
        let moved: Vec<Block> = blocks.iter().map(|b| Block::new(b.center_x + shift, b.width, b.height)).collect();
        let mirrored: Vec<Block> = blocks.iter().map(|b| Block::new(-b.center_x, b.width, b.height)).collect();
        // skip towers whose centres sit within rounding distance of an edge
        prop_assume!(relative_margin(&blocks).map_or(true, |m| m > 1e-9));
        prop_assert_eq!(&g, &global_violations(&moved).ok());
        prop_assert_eq!(&l, &local_violations(&moved).ok());
        prop_assert_eq!(&g, &global_violations(&mirrored).ok());
        prop_assert_eq!(&l, &local_violations(&mirrored).ok());
    }

    #[test]
    fn com_lies_within_blocks_above(seed in any::<u64>()) {
        let blocks = random_tower(&mut ChaCha8Rng::seed_from_u64(seed));
        for i in 1..blocks.len() {
            let c = com_above(&blocks, i);
            let lo = blocks[i..].iter().map(|b| b.center_x).fold(f64::INFINITY, f64::min);
            let hi = blocks[i..].iter().map(|b| b.center_x).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c >= lo - 1e-12 && c <= hi + 1e-12);
        }
    }
}
