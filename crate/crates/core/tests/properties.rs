use compograph::composition::Composition;
use compograph::config::RunConfig;
use compograph::datasets::{generate_synthetic, load_pack, save_pack, Split, SynthSpec};
use compograph::engine::{candidate_embeddings, candidate_set, h_mean, Metric, ModelState};
use compograph::linguistic::{
    build_graph, gcn_forward, normalize_adjacency, GraphKind, GraphSpec, NodeEmbeddings, Normalization,
};
use compograph::numerics::{matmul, Parameter, Tensor};
use compograph::objectives::{build_positive_mask, fusion_loss, sample_negative_mask, triplet_loss, Pooling};
use compograph::visual::{composition_cluster, VisualFeatures};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(seed: u64, attrs: usize, objs: usize) -> SynthSpec {
    let grid = attrs * objs;
    let seen = attrs.max(objs) + (seed as usize % (grid - attrs.max(objs)));
    SynthSpec {
        attribute_count: attrs,
        object_count: objs,
        seen,
        unseen: (grid - seen).clamp(1, 4),
        images_per_composition: 3,
        visual_dim: 6,
        embed_dim: 4,
        seed,
        ..SynthSpec::default()
    }
}

fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for k in (1..n).rev() {
        p.swap(k, rng.random_range(0..=k));
    }
    p
}

fn row_variance(t: &Tensor, rows: &[usize]) -> f64 {
    let d = t.cols();
    let mean: Vec<f64> = (0..d)
        .map(|c| rows.iter().map(|&r| t.get(r, c)).sum::<f64>() / rows.len() as f64)
        .collect();
    rows.iter()
        .map(|&r| (0..d).map(|c| (t.get(r, c) - mean[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / rows.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clustering_contracts_two_separated_groups(seed in any::<u64>(), n1 in 1usize..6, n2 in 1usize..6, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(1, d, 1.0, &mut rng);
        let b = a.scale(-1.0);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..n1 {
            rows.push(a.row(0).iter().map(|v| v + 0.01 * rng.random_range(-1.0..1.0)).collect());
        }
        for _ in 0..n2 {
            rows.push(b.row(0).iter().map(|v| v + 0.01 * rng.random_range(-1.0..1.0)).collect());
        }
        let x = Tensor::from_rows(&rows);
        let xc = composition_cluster(&VisualFeatures::encoded(x.clone())).unwrap().tensor;
        let g1: Vec<usize> = (0..n1).collect();
        let g2: Vec<usize> = (n1..n1 + n2).collect();
        prop_assert!(row_variance(&xc, &g1) <= row_variance(&x, &g1) + 1e-12);
        prop_assert!(row_variance(&xc, &g2) <= row_variance(&x, &g2) + 1e-12);
    }

    #[test]
    fn fixed_graphs_are_symmetric_binary_with_unit_diagonal(seed in any::<u64>(), attrs in 2usize..6, objs in 2usize..6, threshold in 0.0f64..1.0) {
        let pack = generate_synthetic(&small_spec(seed, attrs, objs)).unwrap();
        let z0 = pack.node_embeddings().unwrap();
        for kind in [GraphKind::Link, GraphKind::Embedding] {
            let spec = GraphSpec { kind, threshold, ..GraphSpec::default() };
            let a = build_graph(&spec, &z0, &pack.compositions(Split::Train)).unwrap();
            let n = a.matrix.rows();
            prop_assert_eq!(a.matrix.cols(), n);
            for i in 0..n {
                prop_assert_eq!(a.matrix.get(i, i), 1.0);
                for j in 0..n {
                    let v = a.matrix.get(i, j);
                    prop_assert!(v == 0.0 || v == 1.0);
                    prop_assert_eq!(v, a.matrix.get(j, i));
                }
            }
            let hat = normalize_adjacency(&a, Normalization::Symmetric).unwrap().normalized.unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((hat.get(i, j) - hat.get(j, i)).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn gcn_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..7, layers in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::uniform(n, n, -1.0, 1.0, &mut rng);
        let adj = compograph::linguistic::Adjacency { matrix: raw, learnable: true, normalized: None };
        let hat = normalize_adjacency(&adj, Normalization::Symmetric).unwrap().normalized.unwrap();
        let mut widths = vec![3usize];
        widths.extend((0..layers).map(|_| rng.random_range(1..5)));
        let ws: Vec<Parameter> = widths
            .windows(2)
            .enumerate()
            .map(|(l, p)| Parameter::new(format!("w{l}"), Tensor::randn(p[0], p[1], 1.0, &mut rng)))
            .collect();
        let z0 = Tensor::randn(n, 3, 1.0, &mut rng);
        let out = gcn_forward(&NodeEmbeddings::new(z0.clone(), 1, n - 1).unwrap(), &hat, &ws, 0.2).unwrap().tensor;

        let p = permutation(n, &mut rng);
        let mut phat = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                phat.set(i, j, hat.get(p[i], p[j]));
            }
        }
        let pout = gcn_forward(&NodeEmbeddings::new(z0.select_rows(&p), 1, n - 1).unwrap(), &phat, &ws, 0.2)
            .unwrap()
            .tensor;
        prop_assert!(pout.sub(&out.select_rows(&p)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn fusion_loss_is_nonnegative_and_zero_only_at_the_target(seed in any::<u64>(), b in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, no, k) = (3, 3, 4);
        let labels: Vec<Composition> = (0..b)
            .map(|_| Composition::single(rng.random_range(0..na), rng.random_range(0..no)))
            .collect();
        let y = build_positive_mask(&labels, na, no).unwrap();
        let z = Tensor::randn(na + no, k, 1.0, &mut rng);
        let target = matmul(&y.matrix, &z).unwrap();
        prop_assert_eq!(fusion_loss(&target, &y, &z, Pooling::Sum).unwrap(), 0.0);
        let mut off = target.clone();
        let r = rng.random_range(0..b);
        off.set(r, 0, off.get(r, 0) + 0.5);
        let l = fusion_loss(&off, &y, &z, Pooling::Sum).unwrap();
        prop_assert!(l > 0.0);
        let x = Tensor::randn(b, k, 1.0, &mut rng);
        prop_assert!(fusion_loss(&x, &y, &z, Pooling::Sum).unwrap() >= 0.0);
    }

    #[test]
    fn triplet_loss_is_bounded_by_positive_distance_plus_margin(seed in any::<u64>(), b in 1usize..6, margin in 0.01f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, no, k) = (3, 4, 5);
        let pool: Vec<Composition> = (0..na).flat_map(|a| (0..no).map(move |o| Composition::single(a, o))).collect();
        let labels: Vec<Composition> = (0..b).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let y = build_positive_mask(&labels, na, no).unwrap();
        let yn = sample_negative_mask(&y, &pool, &mut rng).unwrap();
        let z = Tensor::randn(na + no, k, 1.0, &mut rng);
        let x = Tensor::randn(b, k, 1.0, &mut rng);
        let l = triplet_loss(&x, &y, &yn, &z, margin, Pooling::Sum).unwrap();
        let d_pos = fusion_loss(&x, &y, &z, Pooling::Sum).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(l <= d_pos + margin + 1e-12);
    }

    #[test]
    fn masks_select_one_object_and_negatives_differ(seed in any::<u64>(), b in 1usize..12, multi in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (na, no) = (5, 4);
        let pool: Vec<Composition> = (0..8)
            .map(|_| {
                let mut attrs = vec![rng.random_range(0..na)];
                if multi {
                    attrs.push(rng.random_range(0..na));
                }
                Composition::new(attrs, rng.random_range(0..no))
            })
            .collect();
        let mut distinct = pool.clone();
        distinct.sort();
        distinct.dedup();
        prop_assume!(distinct.len() >= 2);
        let labels: Vec<Composition> = (0..b).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect();
        let y = build_positive_mask(&labels, na, no).unwrap();
        let yn = sample_negative_mask(&y, &pool, &mut rng).unwrap();
        for r in 0..b {
            for m in [&y, &yn] {
                let row = m.matrix.row(r);
                prop_assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
                prop_assert_eq!(row[na..].iter().filter(|&&v| v == 1.0).count(), 1);
                prop_assert!(row[..na].iter().any(|&v| v == 1.0));
            }
            prop_assert_ne!(y.matrix.row(r), yn.matrix.row(r));
            prop_assert!(pool.contains(&yn.composition(r).unwrap()));
            prop_assert_eq!(&y.composition(r).unwrap(), &labels[r]);
        }
    }

    #[test]
    fn h_mean_matches_its_formula(c in 0.0f64..=100.0, o in 0.0f64..=100.0) {
        let h = h_mean(c, o);
        let want = if c + o > 0.0 { 2.0 * c * o / (c + o) } else { 0.0 };
        prop_assert!((h - want).abs() <= 1e-12);
        prop_assert!(h >= c.min(o) - 1e-12 && h <= c.max(o) + 1e-12);
    }

    #[test]
    fn synthetic_packs_are_pure_valid_and_round_trip(seed in any::<u64>(), attrs in 2usize..6, objs in 2usize..6) {
        let spec = small_spec(seed, attrs, objs);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(&a, &b);
        a.validate().unwrap();
        let train = a.compositions(Split::Train);
        let test = a.compositions(Split::Test);
        prop_assert!(train.iter().all(|c| !test.contains(c)));
        prop_assert_eq!(a.visual.rows(), a.images.len());
        let dir = tempfile::tempdir().unwrap();
        save_pack(&a, dir.path()).unwrap();
        prop_assert_eq!(&load_pack(dir.path()).unwrap(), &a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn open_minimum_distance_never_exceeds_closed(seed in any::<u64>(), attrs in 2usize..5, objs in 2usize..5) {
        let pack = generate_synthetic(&small_spec(seed, attrs, objs)).unwrap();
        let mut cfg = RunConfig::desk();
        cfg.seed = seed;
        cfg.model.encoder_dims = vec![8, 4];
        cfg.model.gcn_dims = vec![8, 4];
        let model = ModelState::new(&cfg, &pack).unwrap();
        let closed = candidate_set(&pack, Split::Test, Metric::Closed).unwrap();
        let open = candidate_set(&pack, Split::Test, Metric::Open).unwrap();
        let train = pack.compositions(Split::Train);
        prop_assert!(closed.iter().all(|c| !train.contains(c)));
        prop_assert!(closed.iter().all(|c| open.contains(c)));

        let z = model.node_latents(&pack).unwrap();
        let cc = candidate_embeddings(&model, &closed, &z).unwrap();
        let oc = candidate_embeddings(&model, &open, &z).unwrap();
        let idx = pack.indices(Split::Test);
        let xc = compograph::engine::batched_latents(&model, &pack, &idx).unwrap();
        let cm = compograph::engine::nearest_candidates(&xc, &cc).unwrap();
        let om = compograph::engine::nearest_candidates(&xc, &oc).unwrap();
        for (c, o) in cm.iter().zip(&om) {
            prop_assert!(o.distance <= c.distance);
        }
    }

    #[test]
    fn config_survives_toml(seed in any::<u64>(), layers in 1usize..=4, lr in 1e-6f64..1e-1, kind in 0usize..5) {
        let mut cfg = RunConfig::desk();
        cfg.apply(&compograph::config::Overrides {
            seed: Some(seed),
            gcn_layers: Some(layers),
            lr: Some(lr),
            graph: Some([
                GraphKind::VanillaRandom,
                GraphKind::SparseRandom,
                GraphKind::Link,
                GraphKind::Embedding,
                GraphKind::None,
            ][kind]),
            ..Default::default()
        })
        .unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
