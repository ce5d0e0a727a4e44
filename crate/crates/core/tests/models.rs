//! Shape traces, parameter accounting, checkerboard and receptive-field checks.

use polypgan_core::models::analysis::{encoder_layers, measured_receptive_field, RfLayer};
use polypgan_core::models::*;
use polypgan_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn run_generator(config: GeneratorConfig, seed: u64) -> (Vec<[usize; 4]>, [usize; 4], Vec<Tensor>) {
    let gen = Generator::new(config.clone(), seed).unwrap();
    let mut graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::rand_uniform([1, config.in_channels, config.extent, config.extent], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::new(&mut graph, gen.store(), &mut rng);
    let x = ctx.graph.constant(x);
    let out = gen.forward(&mut ctx, x).unwrap();
    let dims = out.heads.iter().map(|&h| graph.shape(h).0).collect();
    let heads = out.heads.iter().map(|&h| graph.value(h).clone()).collect();
    (dims, graph.shape(out.bottleneck).0, heads)
}

#[test]
fn desk_generator_heads_at_quarter_half_full() {
    let (dims, bottleneck, heads) = run_generator(GeneratorConfig::desk(), 3);
    assert_eq!(dims, vec![[1, 3, 16, 16], [1, 3, 32, 32], [1, 3, 64, 64]]);
    assert_eq!(&bottleneck[2..], &[8, 8]);
    for h in heads {
        assert!(h.is_finite());
        assert!(h.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn full_extent_generator_bottleneck_is_32() {
    // narrow widths keep the trace cheap; extents do not depend on width
    let config = GeneratorConfig {
        base_width: 4,
        max_width: 16,
        ..GeneratorConfig::default()
    };
    assert_eq!(config.bottleneck_extent(), 32);
    let (dims, bottleneck, heads) = run_generator(config, 5);
    assert_eq!(&bottleneck[2..], &[32, 32]);
    let extents: Vec<usize> = dims.iter().map(|d| d[2]).collect();
    assert_eq!(extents, vec![64, 128, 256]);
    assert!(heads.iter().all(|h| h.is_finite()));
}

#[test]
fn generator_rejects_invalid_configs() {
    let bad = [
        GeneratorConfig { blocks: 2, ..GeneratorConfig::desk() },
        GeneratorConfig { extent: 48, blocks: 5, ..GeneratorConfig::desk() },
        GeneratorConfig { extent: 16, ..GeneratorConfig::desk() },
        GeneratorConfig { dilations: vec![], ..GeneratorConfig::desk() },
    ];
    for c in bad {
        let err = Generator::new(c.clone(), 0).unwrap_err();
        assert!(!err.to_string().is_empty(), "{c:?}");
    }
}

#[test]
fn generator_rejects_wrong_input_extent() {
    let gen = Generator::new(GeneratorConfig::desk(), 1).unwrap();
    let mut graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::new(&mut graph, gen.store(), &mut rng);
    let x = ctx.graph.constant(Tensor::zeros([1, 1, 32, 32]));
    assert!(gen.forward(&mut ctx, x).is_err());
}

#[test]
fn baseline_reaches_one_by_one() {
    for (extent, stages) in [(256usize, 8usize), (64, 6)] {
        let config = BaselineConfig {
            extent,
            base_width: 2,
            max_width: 8,
            ..BaselineConfig::default()
        };
        assert_eq!(config.stages(), stages);
        let net = BaselineUnet::new(config, 2).unwrap();
        assert_eq!(net.encoder.len(), stages);
        let mut graph = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::rand_uniform([1, 1, extent, extent], -1.0, 1.0, &mut rng);
        let mut ctx = Ctx::new(&mut graph, net.params(), &mut rng);
        let x = ctx.graph.constant(x);
        let out = net.forward(&mut ctx, x).unwrap();
        assert_eq!(graph.shape(out.bottleneck).0[2..], [1, 1]);
        assert_eq!(graph.shape(out.image).0, [1, 3, extent, extent]);
        assert!(graph.value(out.image).data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
    assert!(BaselineUnet::new(BaselineConfig { extent: 96, ..BaselineConfig::default() }, 0).is_err());
}

#[test]
fn discriminator_patch_grid_and_range() {
    let config = DiscriminatorConfig::desk();
    assert_eq!(config.grid_extent(), 8);
    let disc = Discriminator::new(config, 4).unwrap();
    let mut graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::rand_uniform([1, 1, 64, 64], -1.0, 1.0, &mut rng);
    let y = Tensor::rand_uniform([1, 3, 64, 64], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::new(&mut graph, disc.store(), &mut rng);
    let (x, y) = (ctx.graph.constant(x), ctx.graph.constant(y));
    let s = disc.forward(&mut ctx, x, y).unwrap();
    assert_eq!(graph.shape(s).0, [1, 1, 8, 8]);
    assert!(graph.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));

    assert!(Discriminator::new(DiscriminatorConfig { stages: 5, ..DiscriminatorConfig::desk() }, 0).is_err());
}

#[test]
fn zero_weight_discriminator_scores_one_half() {
    let mut disc = Discriminator::new(DiscriminatorConfig::desk(), 9).unwrap();
    for p in disc.store_mut().iter_mut() {
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut graph = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::rand_uniform([1, 1, 64, 64], -1.0, 1.0, &mut rng);
    let y = Tensor::rand_uniform([1, 3, 64, 64], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::new(&mut graph, disc.store(), &mut rng);
    let (x, y) = (ctx.graph.constant(x), ctx.graph.constant(y));
    let s = disc.forward(&mut ctx, x, y).unwrap();
    assert!(graph.value(s).data().iter().all(|&v| v == 0.5));
}

#[test]
fn every_parameter_has_a_unique_name() {
    let gen = Generator::new(GeneratorConfig::desk(), 0).unwrap();
    let report = count_params(&gen);
    let mut names: Vec<&str> = report.rows.iter().map(|r| r.name.as_str()).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
    assert_eq!(report.total, gen.store().numel());
}

#[test]
fn dilation_rates_never_change_generator_count() {
    let base = count_params(&Generator::new(GeneratorConfig::desk(), 0).unwrap()).total;
    for dilations in [vec![1, 1, 1], vec![2, 3, 5], vec![1, 4, 8]] {
        let c = GeneratorConfig { dilations, ..GeneratorConfig::desk() };
        assert_eq!(count_params(&Generator::new(c, 0).unwrap()).total, base);
    }
}

#[test]
fn generator_is_smaller_than_baseline_at_matched_width() {
    for (g, b) in [
        (GeneratorConfig::default(), BaselineConfig::default()),
        (
            GeneratorConfig::desk(),
            BaselineConfig {
                extent: 64,
                base_width: 16,
                ..BaselineConfig::default()
            },
        ),
    ] {
        let gen = count_params(&Generator::new(g, 0).unwrap()).total;
        let base = count_params(&BaselineUnet::new(b, 0).unwrap()).total;
        assert!(gen < base, "{gen} vs {base}");
    }
}

#[test]
fn analytic_receptive_field_matches_impulse_support() {
    for config in [GeneratorConfig::default(), GeneratorConfig::desk(), GeneratorConfig {
        dilations: vec![1, 3],
        blocks: 4,
        ..GeneratorConfig::default()
    }] {
        let analytic = receptive_field(&config).unwrap();
        let blocks = encoder_layers(&config);
        let mut chain: Vec<RfLayer> = Vec::new();
        for (i, block) in blocks.iter().enumerate() {
            chain.extend(block.iter().cloned());
            assert_eq!(measured_receptive_field(&chain).unwrap(), analytic[i], "{config:?} block {i}");
        }
    }
    assert_eq!(receptive_field(&GeneratorConfig::default()).unwrap(), vec![11, 31, 71]);
}

#[test]
fn checkerboard_separates_upsampling_modes_per_seed() {
    let resize = GeneratorConfig::desk();
    let transposed = GeneratorConfig {
        upsampling: Upsampling::TransposedConv,
        ..GeneratorConfig::desk()
    };
    for seed in 0..8 {
        let r = checkerboard_metric(&resize, 1, seed).unwrap();
        let t = checkerboard_metric(&transposed, 1, seed).unwrap();
        assert!(r < 1e-10 && t > 1e-4 && r < t, "seed {seed}: {r} vs {t}");
    }
}
