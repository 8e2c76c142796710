mod common;

use ttvprune::iga::{iga, iga_from_slice, IgaError};
use ttvprune::runtime::{CaptureOnly, CapturePlan, CaptureScope, DType};
use ttvprune::{Matrix, TokenRole, TokenSequence};

#[test]
fn slice_iga_matches_naive_attention_over_100_seeds() {
    let layers = [1usize, 8, 14];
    for seed in 0..100u64 {
        let dtype = if seed % 2 == 0 { DType::Float32 } else { DType::Float64 };
        let rt = common::toy(seed, dtype);
        let seq = TokenSequence::synthetic(3, 8, 4, 256, seed ^ 0xa5a5).unwrap();
        let plan = CapturePlan {
            slice_layers: layers.into(),
            hidden_layers: layers.into(),
            scope: CaptureScope::AllTokens,
            ..Default::default()
        };
        let out = rt.forward_with_hooks(&seq, &mut CaptureOnly(plan)).unwrap();
        let instr = seq.indices_with_role(TokenRole::Instruction);
        let image = seq.indices_with_role(TokenRole::Image);
        for l in layers {
            let c = out.trace.layer(l).unwrap();
            let got = iga_from_slice(c.attention_slice.as_ref().unwrap(), l).unwrap();
            let full = common::naive_attention(c.hidden_in.as_ref().unwrap(), &rt.layer_weights(l).unwrap(), 4);
            assert_eq!(got.tokens, image);
            for (k, &col) in image.iter().enumerate() {
                let want = instr.iter().map(|&r| full.get(r, col)).sum::<f64>() / instr.len() as f64;
                assert!((got.scores[k] - want).abs() < 1e-6, "seed {seed} layer {l} token {col}: {} vs {want}", got.scores[k]);
            }
            assert!(got.scores.iter().sum::<f64>() <= 1.0 + 1e-6);
        }
    }
}

#[test]
fn column_means() {
    let m = Matrix::from_rows(&[vec![0.2, 0.1, 0.3], vec![0.4, 0.0, 0.2]]);
    let got = iga(&m).unwrap();
    for (g, w) in got.iter().zip([0.3, 0.05, 0.25]) {
        assert!((g - w).abs() < 1e-15);
    }
    let single = Matrix::from_rows(&[vec![0.6, 0.1]]);
    assert_eq!(iga(&single).unwrap(), vec![0.6, 0.1]);
    assert_eq!(iga(&Matrix::zeros(0, 3)), Err(IgaError::MissingInstruction));
}

#[test]
fn linear_in_the_slice_and_row_order_free() {
    let a = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![0.3, 0.1, 0.0]]);
    let b = Matrix::from_rows(&[vec![0.0, 0.5, 0.1], vec![0.2, 0.2, 0.2]]);
    let avg = Matrix::from_vec(2, 3, a.data.iter().zip(&b.data).map(|(x, y)| (x + y) / 2.0).collect());
    let (ga, gb, gavg) = (iga(&a).unwrap(), iga(&b).unwrap(), iga(&avg).unwrap());
    for k in 0..3 {
        assert!((gavg[k] - (ga[k] + gb[k]) / 2.0).abs() < 1e-15);
    }
    let swapped = Matrix::from_rows(&[a.row(1).to_vec(), a.row(0).to_vec()]);
    assert_eq!(iga(&swapped).unwrap(), ga);
}
