mod common;

use common::{toy, toy_seq};
use ttvprune::runtime::{
    CaptureOnly, CapturePlan, CaptureScope, DType, DecisionPoint, RemoveAt, RuntimeError,
};
use ttvprune::{Runtime, RuntimeConfig, TokenRole, TokenSequence};

fn bits(m: &ttvprune::Matrix) -> Vec<u64> {
    m.data.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn same_seed_same_weights_and_outputs() {
    for dtype in [DType::Float32, DType::Float64] {
        let (a, b) = (toy(0, dtype), toy(0, dtype));
        assert_eq!(a.parameter_bytes(), b.parameter_bytes());
        let seq = toy_seq(16, 3);
        let plan = CapturePlan::everything(14);
        let ra = a.forward_with_hooks(&seq, &mut CaptureOnly(plan.clone())).unwrap();
        let rb = b.forward_with_hooks(&seq, &mut CaptureOnly(plan)).unwrap();
        assert_eq!(bits(&ra.logits), bits(&rb.logits));
        assert_eq!(ra.trace, rb.trace);
    }
    assert_ne!(toy(0, DType::Float32).parameter_bytes(), toy(1, DType::Float32).parameter_bytes());
}

#[test]
fn config_validation() {
    let bad = RuntimeConfig { n_heads: 5, ..RuntimeConfig::default() };
    assert!(matches!(Runtime::new(bad), Err(RuntimeError::Config(_))));
    assert_eq!(toy(0, DType::Float32).n_layers(), 14);
}

#[test]
fn capture_only_hooks_are_observers() {
    for dtype in [DType::Float32, DType::Float64] {
        let rt = toy(5, dtype);
        let seq = toy_seq(24, 9);
        let base = rt.forward(&seq).unwrap();
        let mut plan = CapturePlan::everything(14);
        plan.full_attention_layers = (1..=14).collect();
        plan.hidden_layers = (1..=14).collect();
        plan.scope = CaptureScope::AllTokens;
        let hooked = rt.forward_with_hooks(&seq, &mut CaptureOnly(plan)).unwrap();
        assert_eq!(bits(&base.logits), bits(&hooked.logits));
        for c in &hooked.trace.layers {
            assert_eq!(c.live_tokens, (0..seq.len()).collect::<Vec<_>>(), "identity map at layer {}", c.layer);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let rt = toy(2, DType::Float32);
    let seq = toy_seq(20, 4);
    let mut plan = CapturePlan::everything(14);
    plan.full_attention_layers = (1..=14).collect();
    let out = rt.forward_with_hooks(&seq, &mut CaptureOnly(plan)).unwrap();
    for c in &out.trace.layers {
        let full = c.full_attention.as_ref().unwrap();
        for (i, row) in full.iter_rows().enumerate() {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6, "layer {} row {i}", c.layer);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0), "causal mask");
        }
        let slice = c.attention_slice.as_ref().unwrap();
        for row in slice.weights.iter_rows() {
            assert!(row.iter().all(|&v| v >= 0.0) && row.iter().sum::<f64>() <= 1.0 + 1e-6);
        }
    }
}

/// 2 system, 10 image, 4 instruction tokens.
fn sixteen() -> TokenSequence {
    TokenSequence::synthetic(2, 10, 4, 256, 11).unwrap()
}

#[test]
fn removal_shrinks_later_layers() {
    let rt = toy(0, DType::Float32);
    let seq = sixteen();
    let mut hooks = RemoveAt {
        point: DecisionPoint::AfterLayer { layer: 2 },
        tokens: vec![3, 5],
        plan: CapturePlan::everything(14),
    };
    let out = rt.forward_with_hooks(&seq, &mut hooks).unwrap();
    assert_eq!(out.trace.layer(2).unwrap().live_tokens.len(), 16);
    for l in 3..=14 {
        let c = out.trace.layer(l).unwrap();
        assert_eq!(c.live_tokens.len(), 14);
        assert!(!c.live_tokens.contains(&3) && !c.live_tokens.contains(&5));
        let s = c.attention_slice.as_ref().unwrap();
        assert_eq!(s.image_tokens, vec![2, 4, 6, 7, 8, 9, 10, 11]);
    }
    assert_eq!(out.tokens.len(), 14);
}

#[test]
fn removing_a_text_token_is_a_contract_violation() {
    let rt = toy(0, DType::Float32);
    let mut hooks = RemoveAt {
        point: DecisionPoint::AfterLayer { layer: 1 },
        tokens: vec![0],
        plan: CapturePlan::default(),
    };
    assert!(matches!(
        rt.forward_with_hooks(&sixteen(), &mut hooks),
        Err(RuntimeError::ContractViolation(_))
    ));
}

/// Pruned run against a reference that deletes the rows from the residual
/// stream and restarts the stack on the shortened sequence.
fn removal_matches_reference(dtype: DType, tol: f64) {
    let rt = toy(7, dtype);
    let seq = sixteen();
    let removed = [3usize, 5];
    let plan = CapturePlan { hidden_layers: [3].into(), scope: CaptureScope::AllTokens, ..Default::default() };
    let full = rt.forward_with_hooks(&seq, &mut CaptureOnly(plan)).unwrap();
    let hidden = full.trace.layer(3).unwrap().hidden_in.clone().unwrap();
    let keep: Vec<usize> = (0..seq.len()).filter(|i| !removed.contains(i)).collect();
    let short = seq.retain_indices(&keep).unwrap();
    assert_eq!(short.positions(), keep.as_slice());
    let reference = rt.resume(3, &short, &hidden.select_rows(&keep)).unwrap();

    let mut hooks = RemoveAt {
        point: DecisionPoint::AfterLayer { layer: 2 },
        tokens: removed.to_vec(),
        plan: CapturePlan::default(),
    };
    let pruned = rt.forward_with_hooks(&seq, &mut hooks).unwrap();
    assert_eq!(pruned.tokens, keep);
    for (r, _) in keep.iter().enumerate() {
        for (a, b) in pruned.logits.row(r).iter().zip(reference.logits.row(r)) {
            assert!((a - b).abs() <= tol * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn removal_equivalence_f32() {
    removal_matches_reference(DType::Float32, 1e-6);
}

#[test]
fn removal_equivalence_f64() {
    removal_matches_reference(DType::Float64, 1e-12);
}

#[test]
fn roles_are_carried_into_the_trace() {
    let rt = toy(0, DType::Float64);
    let seq = sixteen();
    let out = rt.forward_with_hooks(&seq, &mut CaptureOnly(CapturePlan::everything(14))).unwrap();
    assert_eq!(out.trace.roles, seq.roles());
    assert_eq!(out.trace.image_tokens(), (2..12).collect::<Vec<_>>());
    assert_eq!(seq.count(TokenRole::Instruction), 4);
}
