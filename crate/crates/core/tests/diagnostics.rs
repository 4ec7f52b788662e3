use std::collections::BTreeMap;

use focusft::diagnostics::*;
use focusft::masking::{build_causal_mask, build_focusft_mask, Label, Segmentation};
use focusft::model::{init_model, AttentionTrace, ModelConfig};
use focusft::taskgen::{gen_multiturn_agentic, Vocab};
use focusft::{Float, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seg_from(bits: &[bool]) -> Segmentation {
    Segmentation::from_labels(
        bits.iter()
            .map(|&r| if r { Label::Response } else { Label::Context })
            .collect(),
    )
    .unwrap()
}

/// Row-softmax of random scores restricted to the visible cells of `mask`.
fn random_trace(mask: &Tensor, layers: usize, heads: usize, seed: u64) -> AttentionTrace {
    let t = mask.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trace = AttentionTrace::new(layers);
    for l in 0..layers {
        for _ in 0..heads {
            let mut m = Tensor::zeros(&[t, t]);
            for i in 0..t {
                let raw: Vec<Float> = (0..t)
                    .map(|j| if mask.at(i, j) == 0.0 { (3.0 * rng.random::<Float>()).exp() } else { 0.0 })
                    .collect();
                let z: Float = raw.iter().sum();
                for (j, v) in raw.into_iter().enumerate() {
                    m.set(i, j, v / z);
                }
            }
            trace.layers[l].push(m);
        }
    }
    trace
}

fn partition(t: usize, cuts: &[usize]) -> RegionMap {
    let w = cuts[0];
    let mut regions = vec![Region { tag: RegionTag::SinkWindow, start: 0, end: w }];
    let tags = [RegionTag::SystemUser, RegionTag::ToolResponse, RegionTag::AssistantResponse];
    let mut start = w;
    for (k, &c) in cuts[1..].iter().chain([t].iter()).enumerate() {
        if c > start {
            regions.push(Region { tag: tags[k % 3], start, end: c });
            start = c;
        }
    }
    RegionMap::new(regions, w)
}

fn block_trace(t: usize, blocks: &[(usize, usize)]) -> AttentionTrace {
    // Each query row spreads uniformly over one key block.
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        let (a, b) = blocks[i % blocks.len()];
        for j in a..b {
            m.set(i, j, 1.0 / (b - a) as Float);
        }
    }
    AttentionTrace { enabled: true, layers: vec![vec![m; 2]; 3] }
}

#[test]
fn block_attention_matches_closed_form() {
    let t = 20;
    let seg = Segmentation::from_compact("CCCCCCCCCCRRRRRRRRRR").unwrap();
    // Responses 10..20: even rows on keys 0..4, odd rows on 5..10.
    let trace = block_trace(t, &[(0, 4), (5, 10)]);
    let sink = sink_mass(&trace, &seg, 5, QuerySet::Response).unwrap();
    assert!((sink.mean - 0.5).abs() < 1e-9);
    let regions = RegionMap::new(
        vec![
            Region { tag: RegionTag::SinkWindow, start: 0, end: 5 },
            Region { tag: RegionTag::SystemUser, start: 5, end: 8 },
        ],
        5,
    );
    let b = region_budget(&trace, &seg, &regions, QuerySet::Response).unwrap();
    assert!((b[&RegionTag::SinkWindow] - 0.5).abs() < 1e-9);
    assert!((b[&RegionTag::SystemUser] - 0.3).abs() < 1e-9);
    assert!((b[&RegionTag::Filler] - 0.2).abs() < 1e-9);
    let p = positional_profile(&trace, &seg, QuerySet::Response).unwrap();
    assert!((p[0] - 0.125).abs() < 1e-9 && (p[7] - 0.1).abs() < 1e-9 && p[4] == 0.0);
}

#[test]
fn uniform_region_fraction() {
    let t = 100;
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in 0..t {
            m.set(i, j, 0.01);
        }
    }
    let trace = AttentionTrace { enabled: true, layers: vec![vec![m]] };
    let seg = seg_from(&(0..t).map(|i| i >= 50).collect::<Vec<_>>());
    let regions = RegionMap::new(vec![Region { tag: RegionTag::ToolResponse, start: 30, end: 55 }], 5);
    let b = region_budget(&trace, &seg, &regions, QuerySet::Response).unwrap();
    assert!((b[&RegionTag::ToolResponse] - 0.25).abs() < 1e-9);
    let one = RegionMap::new(vec![Region { tag: RegionTag::Filler, start: 0, end: t }], 0);
    let b = region_budget(&trace, &seg, &one, QuerySet::Response).unwrap();
    assert!((b[&RegionTag::Filler] - 1.0).abs() < 1e-9);
    let p = positional_profile(&trace, &seg, QuerySet::Response).unwrap();
    assert!(p.iter().all(|v| (v - 0.01).abs() < 1e-12));
}

#[test]
fn engagement_reference_and_bounds() {
    let b = BTreeMap::from([(RegionTag::SystemUser, 0.27), (RegionTag::ToolResponse, 0.143)]);
    assert!((context_engagement(&b) - 0.413).abs() < 1e-12);
    let b = BTreeMap::from([(RegionTag::AssistantResponse, 1.0)]);
    assert_eq!(context_engagement(&b), 0.0);
}

#[test]
fn causal_model_trace_heatmap_is_lower_triangular_and_round_trips() {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, vocab_size: 24, seed: 9, ..ModelConfig::default() };
    let w = init_model(&cfg).unwrap();
    let s = gen_multiturn_agentic(&Vocab::new(24).unwrap(), 48, 2, 5).unwrap();
    let mut trace = AttentionTrace::new(cfg.n_layers);
    w.logits(&s.tokens, &build_causal_mask(s.len()).unwrap(), None, Some(&mut trace)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("heat");
    let layer = representative_layer(cfg.n_layers);
    let m = heatmap_export(&trace, layer, Some(&s.regions), &prefix, "causal").unwrap();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            assert_eq!(m.at(i, j), 0.0, "({i}, {j})");
        }
    }
    let back = matrix_from_csv(&std::fs::read_to_string(prefix.with_extension("csv")).unwrap()).unwrap();
    assert_eq!(back.shape(), m.shape());
    for (a, b) in back.data().iter().zip(m.data()) {
        assert!((a - b).abs() <= 1e-9);
    }
    let svg = std::fs::read_to_string(prefix.with_extension("svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(heatmap_export(&trace, 7, None, &prefix, "x").is_err());
}

#[test]
fn agentic_regions_partition_and_budget_sums_to_one() {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, vocab_size: 24, seed: 2, ..ModelConfig::default() };
    let w = init_model(&cfg).unwrap();
    let s = gen_multiturn_agentic(&Vocab::new(24).unwrap(), 64, 3, 8).unwrap();
    assert!(s.regions.is_partition(s.len()));
    let mut trace = AttentionTrace::new(cfg.n_layers);
    w.logits(&s.tokens, &build_focusft_mask(&s.segmentation), None, Some(&mut trace)).unwrap();
    let summary = summarize(&trace, &s.segmentation, &s.regions, DEFAULT_SINK_WINDOW, QuerySet::Response).unwrap();
    let total: Float = summary.region_budget.values().sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(!summary.region_budget.contains_key(&RegionTag::Filler) || s.regions.regions.iter().any(|r| r.tag == RegionTag::Filler));
    assert_eq!(summary.layer_count, 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_invariants_on_random_traces(
        bits in proptest::collection::vec(any::<bool>(), 6..32),
        layers in 1usize..4,
        heads in 1usize..4,
        seed in 0u64..10_000,
        cut_a in 0usize..32,
        cut_b in 0usize..32,
    ) {
        let mut bits = bits;
        let last = bits.len() - 1;
        bits[last] = true;
        let seg = seg_from(&bits);
        let t = seg.len();
        let trace = random_trace(&build_focusft_mask(&seg), layers, heads, seed);
        let before = trace.clone();

        let profile = positional_profile(&trace, &seg, QuerySet::Response).unwrap();
        prop_assert!((profile.iter().sum::<Float>() - 1.0).abs() < 1e-6);

        let full = sink_mass(&trace, &seg, t, QuerySet::Response).unwrap();
        prop_assert!((full.mean - 1.0).abs() < 1e-9);

        let w = 1 + cut_a % 5.min(t - 1);
        let sink = sink_mass(&trace, &seg, w, QuerySet::Response).unwrap();
        let avg = sink.per_layer.iter().sum::<Float>() / sink.per_layer.len() as Float;
        prop_assert_eq!(avg, sink.mean);
        prop_assert!(sink.per_layer.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));

        let mut cuts = vec![w, w + cut_a % (t - w + 1), w + cut_b % (t - w + 1)];
        cuts[1..].sort();
        let regions = partition(t, &cuts);
        prop_assert!(regions.is_partition(t));
        let budget = region_budget(&trace, &seg, &regions, QuerySet::Response).unwrap();
        prop_assert!((budget.values().sum::<Float>() - 1.0).abs() < 1e-6);
        prop_assert!(budget.values().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        prop_assert!((budget[&RegionTag::SinkWindow] - sink.mean).abs() < 1e-9);
        prop_assert!(context_engagement(&budget) <= 1.0 + 1e-12);

        prop_assert_eq!(trace, before);
    }
}
