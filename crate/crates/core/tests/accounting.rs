mod common;

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};

use svtune::lora::LoraAdapter;
use svtune::model::{init_params, ModelConfig};
use svtune::params::{ParamGroup, ParamStore};
use svtune::peft::{count_trainable, make_baseline, BaselineOptions, Method};
use svtune::svd_adapter::SvdAdapter;

fn configs() -> Vec<(&'static str, ModelConfig)> {
    let tiny = common::tiny();
    vec![
        ("toy", ModelConfig::toy()),
        ("desk", ModelConfig::desk()),
        ("tiny", tiny.clone()),
        (
            "tiny_deep_wide",
            ModelConfig {
                depth: 3,
                mlp_hidden: 8,
                ..tiny.clone()
            },
        ),
        (
            "tiny_patch8",
            ModelConfig {
                image_size: 32,
                patch_size: 8,
                embed_dim: 24,
                num_heads: 3,
                ..tiny
            },
        ),
    ]
}

/// `(D, K)` of every dense encoder weight, read off the pretrained store.
fn encoder_matrices(store: &ParamStore) -> Vec<(usize, usize)> {
    store
        .iter()
        .filter(|(n, _, g, _)| *g == ParamGroup::EncoderWeight && n.ends_with(".weight"))
        .map(|(_, t, _, _)| t.dims2().unwrap())
        .collect()
}

fn rewired(config: &ModelConfig, method: Method) -> (ParamStore, ParamStore) {
    let pre = init_params(config, 7, &Device::Cpu).unwrap();
    let (store, _) = make_baseline(&pre, config, &method, &BaselineOptions::for_config(config)).unwrap();
    (pre, store)
}

fn trainable_groups(store: &ParamStore) -> BTreeSet<ParamGroup> {
    store.iter().filter(|(_, _, _, t)| *t).map(|(_, _, g, _)| g).collect()
}

fn sum_trainable(store: &ParamStore) -> usize {
    store.iter().filter(|(_, _, _, t)| *t).map(|(_, t, _, _)| t.elem_count()).sum()
}

#[test]
fn closed_form_matches_enumeration_for_every_method_and_config() {
    for (name, config) in configs() {
        for method in [
            Method::Frozen,
            Method::BiasOnly,
            Method::Lora(1),
            Method::Lora(4),
            Method::Svd,
            Method::Full,
        ] {
            let report = count_trainable(&method, &config)
                .unwrap_or_else(|e| panic!("{name}/{method}: {e}"));
            let (_, store) = rewired(&config, method);
            assert_eq!(report.trainable, sum_trainable(&store), "{name}/{method}");
        }
    }
}

#[test]
fn lora_trainable_is_rank_times_dims_of_adapted_matrices() {
    for (name, config) in configs() {
        let (pre, store) = rewired(&config, Method::Lora(4));
        let want: usize = encoder_matrices(&pre).iter().map(|(d, k)| 4 * (d + k)).sum();
        assert_eq!(sum_trainable(&store), want, "{name}");
        assert_eq!(trainable_groups(&store), BTreeSet::from([ParamGroup::LoraFactor]));
    }
}

#[test]
fn svd_trainable_groups_are_exactly_the_tuned_components() {
    let config = common::tiny();
    let (pre, store) = rewired(&config, Method::Svd);
    assert_eq!(
        trainable_groups(&store),
        BTreeSet::from([
            ParamGroup::SvdScale,
            ParamGroup::SvdShift,
            ParamGroup::LayerNorm,
            ParamGroup::PosEmbed,
            ParamGroup::Tal,
        ])
    );
    let per_matrix: usize = encoder_matrices(&pre).iter().map(|(d, k)| d.min(k)).sum();
    let scale_shift: usize = store
        .iter()
        .filter(|(_, _, g, _)| matches!(g, ParamGroup::SvdScale | ParamGroup::SvdShift))
        .map(|(_, t, _, _)| t.elem_count())
        .sum();
    assert_eq!(scale_shift, 2 * per_matrix);
}

#[test]
fn bias_only_counts_encoder_biases_and_text_layer() {
    let config = ModelConfig::toy();
    let (pre, store) = rewired(&config, Method::BiasOnly);
    let biases: usize = pre
        .iter()
        .filter(|(n, _, g, _)| *g == ParamGroup::EncoderBias && n.ends_with(".bias"))
        .map(|(_, t, _, _)| t.elem_count())
        .sum();
    let e = config.prompt_dim;
    assert_eq!(sum_trainable(&store), biases + e * e + e);
}

#[test]
fn svd_adapters_are_smaller_than_every_lora_rank_on_toy() {
    let config = ModelConfig::toy();
    let svd = count_trainable(&Method::Svd, &config).unwrap();
    let adapter = |r: &svtune::peft::ParamReport, groups: &[&str]| -> usize {
        groups.iter().filter_map(|g| r.breakdown.get(*g)).sum()
    };
    let svd_adapter = adapter(&svd, &["svd_scale", "svd_shift"]);
    for r in 1..=8 {
        let lora = count_trainable(&Method::Lora(r), &config).unwrap();
        assert!(svd_adapter < adapter(&lora, &["lora_factor"]), "r={r}");
    }
    // whole trainable sets, including layernorm, pos_embed and TAL
    let lora4 = count_trainable(&Method::Lora(4), &config).unwrap();
    assert!(svd.trainable < lora4.trainable);
    assert!(svd.fraction < 0.01, "fraction {}", svd.fraction);
}

#[test]
fn single_matrix_counts() {
    let dev = Device::Cpu;
    for (d, k, lora4, svd) in [(768, 2304, 12288, 1536), (768, 768, 6144, 1536)] {
        let w = Tensor::zeros((d, k), DType::F32, &dev).unwrap();
        let l = LoraAdapter::init(&w, None, 4, 0).unwrap();
        assert_eq!(l.x().elem_count() + l.y().elem_count(), lora4);
        assert_eq!(l.trainable_count(), lora4);

        let r = d.min(k);
        let a = SvdAdapter::from_parts(
            Tensor::zeros((d, r), DType::F32, &dev).unwrap(),
            Tensor::zeros(r, DType::F32, &dev).unwrap(),
            Tensor::zeros((r, k), DType::F32, &dev).unwrap(),
            Tensor::ones(r, DType::F32, &dev).unwrap(),
            Tensor::zeros(r, DType::F32, &dev).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(a.scale().elem_count() + a.shift().elem_count(), svd);
        assert_eq!(a.trainable_count(), svd);
    }
}
