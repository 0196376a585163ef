mod common;

use common::*;
use promptvit::graph::Graph;
use promptvit::petl::{
    build_method, closed_form_trainable, count_trainable, dvpt_forward, forward, meta_net_forward, metanet_size,
    pool_images, sidetune_forward, vpt_forward, DvptMode, MethodKind, Model, PetlMethodConfig, ALPHA_NAME,
    PROMPT_NAME,
};
use promptvit::vit::{vit_forward, ViTConfig};
use promptvit::{Error, ParamGroup, ParamStore, Tensor};

fn build(method: &PetlMethodConfig, cfg: &ViTConfig, seed: u64) -> Model<f64> {
    let bb = loud_backbone(cfg, seed);
    build_method(method, &bb, cfg, &mut rng(seed + 1)).unwrap()
}

fn all_methods() -> Vec<PetlMethodConfig> {
    vec![
        PetlMethodConfig::full(),
        PetlMethodConfig::linear(),
        PetlMethodConfig::partial(1),
        PetlMethodConfig::partial(2),
        PetlMethodConfig::mlp(1),
        PetlMethodConfig::mlp(3),
        PetlMethodConfig::bias(),
        PetlMethodConfig::adapter(8),
        PetlMethodConfig::adapter(64),
        PetlMethodConfig::sidetune(),
        PetlMethodConfig::vpt(1),
        PetlMethodConfig::vpt(4),
        PetlMethodConfig::dvpt(4, 2, DvptMode::Shared),
        PetlMethodConfig::dvpt(4, 4, DvptMode::Shared),
        PetlMethodConfig::dvpt(4, 6, DvptMode::Specific),
        PetlMethodConfig::dvpt(2, 1, DvptMode::Specific),
    ]
}

fn logits(g: &Graph<f64>, out: &promptvit::vit::ForwardOutput) -> Vec<f64> {
    g.value(out.logits).data().to_vec()
}

#[test]
fn linear_trains_only_the_head() {
    let m = build(&PetlMethodConfig::linear(), &desk10(), 0);
    let names: Vec<_> = m.params.iter().filter(|p| p.trainable).map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["head.weight", "head.bias"]);
    assert_eq!(count_trainable(&m.params).trainable, 10 * 32 + 10);
}

#[test]
fn bias_trains_exactly_bias_and_shift_terms() {
    let cfg = desk10();
    let m = build(&PetlMethodConfig::bias(), &cfg, 0);
    let mut expected = vec!["patch_embed.bias".to_string()];
    for i in 0..cfg.num_layers {
        for n in [
            "ln1.shift",
            "ln2.shift",
            "attn.q.bias",
            "attn.k.bias",
            "attn.v.bias",
            "attn.o.bias",
            "mlp.fc1.bias",
            "mlp.fc2.bias",
        ] {
            expected.push(format!("blocks.{i}.{n}"));
        }
    }
    expected.push("head.bias".into());
    let mut got: Vec<_> = m
        .params
        .iter()
        .filter(|p| p.trainable && p.name != "head.weight")
        .map(|p| p.name.clone())
        .collect();
    got.sort();
    expected.sort();
    assert_eq!(got, expected);
}

#[test]
fn dvpt_count_matches_by_name_sum() {
    let cfg = desk10();
    let method = PetlMethodConfig::dvpt(4, 4, DvptMode::Shared);
    let m = build(&method, &cfg, 0);
    let by_name: usize = m
        .params
        .iter()
        .filter(|p| p.name.starts_with("metanet.") || p.name == PROMPT_NAME || p.name.starts_with("head."))
        .map(|p| p.value.shape().iter().product::<usize>())
        .sum();
    let formula = (48 * 32 + 32) + (32 * 32 + 32) * 2 + (32 * 32 + 32) + (4 * 32) + (10 * 32 + 10);
    assert_eq!(by_name, formula);
    assert_eq!(count_trainable(&m.params).trainable, formula);
}

#[test]
fn closed_form_equals_mask_sum_for_every_method() {
    for cfg in [desk10(), tiny()] {
        for method in all_methods() {
            if method.kind == MethodKind::PartialK && method.k > cfg.num_layers {
                continue;
            }
            let m = build(&method, &cfg, 3);
            let count = count_trainable(&m.params);
            assert_eq!(count.trainable, closed_form_trainable(&method, &cfg), "{}", method.display_name());
            assert_eq!(count.by_group.values().sum::<usize>(), count.trainable);
        }
    }
}

#[test]
fn full_count_is_total() {
    let m = build(&PetlMethodConfig::full(), &tiny(), 0);
    let c = count_trainable(&m.params);
    assert_eq!(c.trainable, c.total);
}

#[test]
fn adapter_count_closed_form() {
    let cfg = tiny();
    let (n, d) = (cfg.num_layers, cfg.width);
    for r in [8, 64] {
        let m = build(&PetlMethodConfig::adapter(r), &cfg, 0);
        let head = cfg.num_classes * d + cfg.num_classes;
        assert_eq!(count_trainable(&m.params).trainable, 2 * n * (d * r + r + r * d + d) + head);
    }
}

#[test]
fn metanet_differences() {
    let cfg = desk10();
    let shared = count_trainable(&build(&PetlMethodConfig::dvpt(4, 4, DvptMode::Shared), &cfg, 0).params);
    let vpt = count_trainable(&build(&PetlMethodConfig::vpt(4), &cfg, 0).params);
    assert_eq!(
        shared.trainable - vpt.trainable,
        shared.by_group[&ParamGroup::Metanet]
    );
    assert_eq!(
        shared.by_group[&ParamGroup::Metanet],
        metanet_size(&PetlMethodConfig::dvpt(4, 4, DvptMode::Shared), 32)
    );

    let specific = count_trainable(&build(&PetlMethodConfig::dvpt(4, 4, DvptMode::Specific), &cfg, 0).params);
    let (p, d) = (4, 32);
    assert_eq!(specific.trainable - shared.trainable, (p - 1) * d * (d + 1));

    let counts: Vec<usize> = [2, 4, 6]
        .iter()
        .map(|&l| closed_form_trainable(&PetlMethodConfig::dvpt(4, l, DvptMode::Shared), &cfg))
        .collect();
    assert!(counts[0] < counts[1] && counts[1] < counts[2]);
}

#[test]
fn prompts_change_logits_even_when_zero() {
    let cfg = tiny();
    let mut m = build(&PetlMethodConfig::vpt(3), &cfg, 5);
    m.params.get_mut(PROMPT_NAME).unwrap().value = Tensor::zeros(vec![3, cfg.width]);
    let imgs = images(&mut rng(6), 2, &cfg);
    let mut g = Graph::new();
    let out = vpt_forward(&mut g, &m, &imgs).unwrap();
    let mut g2 = Graph::new();
    let plain = vit_forward(&mut g2, &m.params, &cfg, &imgs).unwrap();
    assert_ne!(logits(&g, &out), logits(&g2, &plain));
    assert_eq!(out.seq_lens, vec![1 + 3 + cfg.num_patches(); cfg.num_layers]);
}

#[test]
fn vpt_rejects_zero_prompts() {
    let cfg = tiny();
    let bb = loud_backbone(&cfg, 0);
    let err = build_method(&PetlMethodConfig::vpt(0), &bb, &cfg, &mut rng(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn zero_metanet_reduces_to_vpt_bitwise() {
    let cfg = tiny();
    for mode in [DvptMode::Shared, DvptMode::Specific] {
        let m = build(&PetlMethodConfig::dvpt(4, 4, mode).with_input_dim(48), &cfg, 8);
        let imgs = images(&mut rng(9), 4, &cfg);
        let mut g1 = Graph::new();
        let a = dvpt_forward(&mut g1, &m, &imgs).unwrap();
        let mut g2 = Graph::new();
        let b = vpt_forward(&mut g2, &m, &imgs).unwrap();
        let (la, lb) = (logits(&g1, &a), logits(&g2, &b));
        assert!(la.iter().zip(&lb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

fn randomize_metanet(m: &mut Model<f64>, seed: u64) {
    use rand::Rng;
    let mut r = rng(seed);
    for p in m.params.iter_mut().filter(|p| p.name.starts_with("metanet.")) {
        for v in p.value.data_mut() {
            *v = r.random::<f64>() - 0.5;
        }
    }
}

#[test]
fn shared_delta_is_row_constant_and_specific_is_instance_wise() {
    let cfg = tiny();
    let mut shared = build(&PetlMethodConfig::dvpt(4, 4, DvptMode::Shared), &cfg, 1);
    randomize_metanet(&mut shared, 2);
    let imgs = images(&mut rng(3), 2, &cfg);
    let grid = promptvit::petl::pool_grid(&cfg, 48).unwrap();
    let pooled = pool_images(&imgs, grid).unwrap();

    let mut g = Graph::new();
    let x = g.input(pooled.clone());
    let pi = meta_net_forward(&mut g, &shared.params, &shared.method, cfg.width, x).unwrap();
    assert_eq!(g.shape(pi), &[2, cfg.width]);

    let mut g = Graph::new();
    let out = dvpt_forward(&mut g, &shared, &imgs).unwrap();
    let px = g.value(out.prompts.unwrap()).data().to_vec();
    let base = shared.params.get(PROMPT_NAME).unwrap().value.data().to_vec();
    let d = cfg.width;
    for b in 0..2 {
        let delta = |row: usize| -> Vec<f64> {
            (0..d)
                .map(|j| px[(b * 4 + row) * d + j] - base[row * d + j])
                .collect()
        };
        let first = delta(0);
        for row in 1..4 {
            let other = delta(row);
            assert!(first.iter().zip(&other).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    let mut specific = build(&PetlMethodConfig::dvpt(4, 4, DvptMode::Specific), &cfg, 1);
    randomize_metanet(&mut specific, 2);
    let mut g = Graph::new();
    let x = g.input(pooled);
    let pi = meta_net_forward(&mut g, &specific.params, &specific.method, d, x).unwrap();
    assert_eq!(g.shape(pi), &[2, 4, d]);
    let v = g.value(pi).data();
    let max_diff = (0..4 * d).map(|i| (v[i] - v[4 * d + i]).abs()).fold(0.0, f64::max);
    assert!(max_diff > 0.0);
}

#[test]
fn metanet_rejects_wrong_input_width() {
    let cfg = tiny();
    let m = build(&PetlMethodConfig::dvpt(4, 2, DvptMode::Shared), &cfg, 1);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![1, 12]));
    let err = meta_net_forward(&mut g, &m.params, &m.method, cfg.width, x).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn dvpt_gradients_reach_prompts_and_metanet() {
    let cfg = tiny();
    let imgs = images(&mut rng(4), 3, &cfg);
    let norm = |m: &ParamStore<f64>, name: &str| -> f64 {
        m.get(name)
            .unwrap()
            .grad
            .as_ref()
            .map(|g| g.iter().map(|v| v * v).sum())
            .unwrap_or(0.0)
    };
    let run = |m: &mut Model<f64>| {
        let mut g = Graph::new();
        let out = dvpt_forward(&mut g, m, &imgs).unwrap();
        let loss = g.cross_entropy(out.logits, &[0, 1, 2]).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_into(&mut m.params);
    };

    let mut m = build(&PetlMethodConfig::dvpt(4, 4, DvptMode::Shared), &cfg, 2);
    run(&mut m);
    assert!(norm(&m.params, PROMPT_NAME) > 0.0);
    assert!(norm(&m.params, "metanet.3.weight") > 0.0);

    randomize_metanet(&mut m, 7);
    m.params.zero_grads();
    run(&mut m);
    for i in 0..4 {
        assert!(norm(&m.params, &format!("metanet.{i}.weight")) > 0.0, "layer {i}");
    }
    for p in m.params.iter().filter(|p| p.group.is_backbone()) {
        assert!(p.grad.is_none(), "{}", p.name);
    }
}

#[test]
fn prompts_are_structurally_input_independent_only_in_vpt() {
    let cfg = tiny();
    let imgs = images(&mut rng(4), 2, &cfg);
    let vpt = build(&PetlMethodConfig::vpt(4), &cfg, 2);
    let mut g = Graph::new();
    let out = vpt_forward(&mut g, &vpt, &imgs).unwrap();
    let p = out.prompts.unwrap();
    assert!(out.inputs.iter().all(|&i| !g.depends_on(p, i)));

    let dvpt = build(&PetlMethodConfig::dvpt(4, 2, DvptMode::Shared), &cfg, 2);
    let mut g = Graph::new();
    let out = dvpt_forward(&mut g, &dvpt, &imgs).unwrap();
    let p = out.prompts.unwrap();
    assert!(out.inputs.iter().any(|&i| g.depends_on(p, i)));
}

#[test]
fn zero_adapter_matches_frozen_forward() {
    let cfg = tiny();
    let imgs = images(&mut rng(1), 3, &cfg);
    for r in [8, 64] {
        let adapted = build(&PetlMethodConfig::adapter(r), &cfg, 11);
        let mut linear = build(&PetlMethodConfig::linear(), &cfg, 11);
        linear.params.copy_values_from(&adapted.params);
        let mut g1 = Graph::new();
        let a = forward(&mut g1, &adapted, &imgs).unwrap();
        let mut g2 = Graph::new();
        let b = forward(&mut g2, &linear, &imgs).unwrap();
        assert_eq!(logits(&g1, &a), logits(&g2, &b));
    }
}

#[test]
fn sidetune_limits() {
    let cfg = tiny();
    let imgs = images(&mut rng(1), 2, &cfg);
    let mut side = build(&PetlMethodConfig::sidetune(), &cfg, 12);
    let mut linear = build(&PetlMethodConfig::linear(), &cfg, 12);
    linear.params.copy_values_from(&side.params);

    side.params.get_mut(ALPHA_NAME).unwrap().value = Tensor::from_f64(vec![1], &[40.0]).unwrap();
    let mut g1 = Graph::new();
    let a = sidetune_forward(&mut g1, &side, &imgs).unwrap();
    let mut g2 = Graph::new();
    let b = forward(&mut g2, &linear, &imgs).unwrap();
    for (x, y) in logits(&g1, &a).iter().zip(logits(&g2, &b)) {
        assert!((x - y).abs() < 1e-12);
    }

    // α → 0: the backbone no longer matters.
    side.params.get_mut(ALPHA_NAME).unwrap().value = Tensor::from_f64(vec![1], &[-40.0]).unwrap();
    let mut g1 = Graph::new();
    let a = sidetune_forward(&mut g1, &side, &imgs).unwrap();
    let mut other = side.clone();
    for p in other.params.iter_mut().filter(|p| p.group.is_backbone()) {
        p.value.data_mut().iter_mut().for_each(|v| *v *= -3.0);
    }
    let mut g2 = Graph::new();
    let b = sidetune_forward(&mut g2, &other, &imgs).unwrap();
    for (x, y) in logits(&g1, &a).iter().zip(logits(&g2, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn sidetune_gradients_skip_backbone() {
    let cfg = tiny();
    let imgs = images(&mut rng(1), 2, &cfg);
    let mut m = build(&PetlMethodConfig::sidetune(), &cfg, 12);
    let mut g = Graph::new();
    let out = sidetune_forward(&mut g, &m, &imgs).unwrap();
    let loss = g.cross_entropy(out.logits, &[1, 4]).unwrap();
    g.backward(loss).unwrap();
    g.accumulate_into(&mut m.params);
    for p in m.params.iter() {
        let nonzero = p.grad.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0));
        match p.group {
            ParamGroup::Side | ParamGroup::Head => assert!(nonzero, "{}", p.name),
            _ => assert!(p.grad.is_none(), "{}", p.name),
        }
    }
}

#[test]
fn unknown_kind_is_config_error() {
    assert!(matches!("lora".parse::<MethodKind>(), Err(Error::Config(_))));
    let json = r#"{"kind": "noah"}"#;
    assert!(serde_json::from_str::<PetlMethodConfig>(json).is_err());
    let ok: PetlMethodConfig = serde_json::from_str(r#"{"kind": "dvpt", "dvpt_mode": "specific"}"#).unwrap();
    assert_eq!(ok.metanet_layers, 4);
    assert_eq!(ok.dvpt_mode, DvptMode::Specific);
}

#[test]
fn every_method_forward_has_class_logits() {
    let cfg = tiny();
    let imgs = images(&mut rng(2), 2, &cfg);
    for method in all_methods() {
        let m = build(&method, &cfg, 4);
        let mut g = Graph::new();
        let out = forward(&mut g, &m, &imgs).unwrap();
        assert_eq!(g.shape(out.logits), &[2, cfg.num_classes]);
        let p = if method.uses_prompts() { method.prompt_count } else { 0 };
        assert_eq!(out.seq_lens, vec![cfg.seq_len(p); cfg.num_layers]);
    }
}
