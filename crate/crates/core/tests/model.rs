use ssmq_core::archive::{decode, encode};
use ssmq_core::calibrate::{collect_stats, RecordSpec};
use ssmq_core::model::{
    gen_toy_model, load_float, synthetic_tokens, LanguageModel, ModelConfig, ToySpec,
};
use ssmq_core::ssm::{Site, SiteHook, Variant};
use ssmq_core::tensor::metrics::rel_l2;
use ssmq_core::{Result, Tensor};

fn toy(variant: Variant, seed: u64) -> ssmq_core::model::FloatModel {
    gen_toy_model(&ToySpec::new(ModelConfig::toy(variant), seed)).unwrap()
}

#[test]
fn same_seed_gives_identical_archive_bytes() {
    let a = encode(&toy(Variant::Mamba2, 7).to_archive().unwrap()).unwrap();
    let b = encode(&toy(Variant::Mamba2, 7).to_archive().unwrap()).unwrap();
    assert_eq!(a, b);
    let c = encode(&toy(Variant::Mamba2, 8).to_archive().unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn generated_a_is_negative() {
    for v in [Variant::Mamba1, Variant::Mamba2] {
        let m = toy(v, 3);
        for b in &m.blocks {
            assert!(b.a().data().iter().all(|&a| a < 0.0));
        }
    }
}

#[test]
fn archive_round_trip() {
    for v in [Variant::Mamba1, Variant::Mamba2] {
        let m = toy(v, 5);
        let back =
            load_float(&decode(&encode(&m.to_archive().unwrap()).unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}

#[test]
fn x_channel_spread_is_wide() {
    let m = toy(Variant::Mamba2, 11);
    let tokens = synthetic_tokens(4, 32, m.config.vocab, 1);
    let spec = RecordSpec {
        sites: vec![Site::X],
        ..Default::default()
    };
    let st = collect_stats(&m, &tokens, &spec).unwrap();
    for b in 0..m.config.n_blocks {
        let cm = &st.site(b, Site::X).unwrap().channel_max;
        let hi = cm.iter().cloned().fold(0.0f32, f32::max);
        let lo = cm.iter().cloned().fold(f32::INFINITY, f32::min);
        assert!(hi / lo >= 100.0, "block {b}: spread {}", hi / lo);
    }
}

#[test]
fn hadamard_rotation_preserves_logits() {
    for v in [Variant::Mamba1, Variant::Mamba2] {
        let m = toy(v, 2);
        let r = m.fuse_hadamard().unwrap();
        assert!(r.rotated);
        assert!(r.fuse_hadamard().is_err());
        let tokens = &synthetic_tokens(1, 24, m.config.vocab, 9)[0];
        let a = m.forward(tokens).unwrap();
        let b = r.forward(tokens).unwrap();
        assert!(
            rel_l2(b.data(), a.data()) <= 1e-5,
            "{v:?}: {}",
            rel_l2(b.data(), a.data())
        );
    }
}

#[test]
fn stateful_decode_matches_prefill() {
    let m = toy(Variant::Mamba2, 4);
    let tokens = &synthetic_tokens(1, 32, m.config.vocab, 3)[0];
    let full = m.forward(tokens).unwrap();
    let mut states = m.init_states();
    let mut hook = ssmq_core::model::NoModelHook::default();
    for (t, tok) in tokens.iter().enumerate() {
        let step = m
            .forward_with(&[*tok], &mut hook, Some(&mut states))
            .unwrap();
        assert!(rel_l2(step.data(), full.row(t)) <= 1e-5);
    }
}

#[test]
fn stats_invariant_to_sample_order() {
    let m = toy(Variant::Mamba2, 6);
    let mut tokens = synthetic_tokens(8, 16, m.config.vocab, 2);
    let spec = RecordSpec {
        sites: Site::ALL.to_vec(),
        keep_values: vec![Site::X],
        capture_rows: vec![],
    };
    let a = collect_stats(&m, &tokens, &spec).unwrap();
    tokens.reverse();
    tokens.swap(1, 5);
    let b = collect_stats(&m, &tokens, &spec).unwrap();
    assert_eq!(a.blocks, b.blocks);
    assert!(collect_stats(&m, &[], &spec).is_err());
}

/// Records every activation tensor verbatim.
#[derive(Default)]
struct Tape(Vec<(Site, Tensor)>);

impl SiteHook for Tape {
    fn visit(&mut self, site: Site, t: &mut Tensor) -> Result<()> {
        self.0.push((site, t.clone()));
        Ok(())
    }
}

#[test]
fn stats_match_recompute_oracle() {
    let m = toy(Variant::Mamba2, 12);
    let tokens = synthetic_tokens(8, 12, m.config.vocab, 4);
    let spec = RecordSpec {
        sites: vec![Site::U, Site::X, Site::B, Site::Y],
        ..Default::default()
    };
    let st = collect_stats(&m, &tokens, &spec).unwrap();
    let n = m.config.n_blocks;
    for site in [Site::U, Site::X, Site::B, Site::Y] {
        for b in 0..n {
            let mut want: Option<Vec<f32>> = None;
            for s in &tokens {
                let mut tapes: Vec<Tape> = (0..n).map(|_| Tape::default()).collect();
                m.forward_with(s, &mut tapes, None).unwrap();
                for (ts, t) in &tapes[b].0 {
                    if *ts != site {
                        continue;
                    }
                    let w = want.get_or_insert_with(|| vec![0.0; t.last_dim()]);
                    for r in 0..t.n_rows() {
                        for (m, v) in w.iter_mut().zip(t.row(r)) {
                            *m = m.max(v.abs());
                        }
                    }
                }
            }
            assert_eq!(st.site(b, site).unwrap().channel_max, want.unwrap());
        }
    }
}

#[test]
fn single_token_stats_equal_abs_activation() {
    let m = toy(Variant::Mamba2, 1);
    let spec = RecordSpec {
        sites: vec![Site::X],
        ..Default::default()
    };
    let st = collect_stats(&m, &[vec![5]], &spec).unwrap();
    let mut tapes: Vec<Tape> = (0..m.config.n_blocks).map(|_| Tape::default()).collect();
    m.forward_with(&[5], &mut tapes, None).unwrap();
    let x = &tapes[0].0.iter().find(|(s, _)| *s == Site::X).unwrap().1;
    let want: Vec<f32> = x.data().iter().map(|v| v.abs()).collect();
    assert_eq!(st.site(0, Site::X).unwrap().channel_max, want);
}
