use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

/// Dropout inside the feed-forward block. One layer sits after the activation;
/// a second one, if requested, after the up-projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfnDropout {
    pub p: f64,
    pub layers: usize,
}

impl FfnDropout {
    pub const NONE: FfnDropout = FfnDropout { p: 0.0, layers: 1 };
}

/// `down(a ⊙ silu(b))` where `[a | b] = x·up` and `up` is `d×2m`.
pub fn swiglu_ffn(
    tape: &mut Tape,
    x: Var,
    up: Var,
    down: Var,
    dropout: FfnDropout,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let mut u = tape.matmul(x, up)?;
    if dropout.layers >= 2 {
        u = tape.dropout(u, dropout.p, rng.as_deref_mut())?;
    }
    let m = tape.shape(u)[1] / 2;
    let a = tape.slice_cols(u, 0, m)?;
    let b = tape.slice_cols(u, m, m)?;
    let sb = tape.silu(b)?;
    let h = tape.mul(a, sb)?;
    let h = tape.dropout(h, dropout.p, rng)?;
    tape.matmul(h, down)
}

/// `W2·gelu(W1·x)` with the tanh approximation.
pub fn gelu_ffn(
    tape: &mut Tape,
    x: Var,
    w1: Var,
    w2: Var,
    dropout: FfnDropout,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let mut u = tape.matmul(x, w1)?;
    if dropout.layers >= 2 {
        u = tape.dropout(u, dropout.p, rng.as_deref_mut())?;
    }
    let h = tape.gelu(u)?;
    let h = tape.dropout(h, dropout.p, rng)?;
    tape.matmul(h, w2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 2]));
        let up = tape.constant(Tensor::filled(vec![2, 4], 0.7));
        let down = tape.constant(Tensor::filled(vec![2, 2], -0.4));
        let y = swiglu_ffn(&mut tape, x, up, down, FfnDropout::NONE, None).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        let y = gelu_ffn(&mut tape, x, up, down, FfnDropout::NONE, None).unwrap_err();
        assert!(matches!(y, crate::Error::Dimension { .. }));
    }

    #[test]
    fn swiglu_hand_evaluation() {
        // d = 2, m = 2, up = [I | 2I], down = I: y = x ⊙ silu(2x).
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap());
        let up = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0, 2.0, 0.0], vec![0.0, 1.0, 0.0, 2.0]]).unwrap(),
        );
        let down = tape.constant(Tensor::eye(2));
        let y = swiglu_ffn(&mut tape, x, up, down, FfnDropout::NONE, None).unwrap();
        let d = tape.value(y).data();
        assert_abs_diff_eq!(d[0], 0.5 * silu(1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(d[1], -silu(-2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(d[0], 0.365529, epsilon = 1e-6);
        assert_abs_diff_eq!(d[1], 0.238406, epsilon = 1e-6);
    }

    #[test]
    fn dropout_layers_are_inert_in_eval() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.4]]).unwrap());
        let up = tape.constant(Tensor::filled(vec![2, 4], 0.5));
        let down = tape.constant(Tensor::filled(vec![2, 2], 0.5));
        let one = FfnDropout { p: 0.5, layers: 1 };
        let two = FfnDropout { p: 0.5, layers: 2 };
        let a = swiglu_ffn(&mut tape, x, up, down, one, None).unwrap();
        let b = swiglu_ffn(&mut tape, x, up, down, two, None).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn gelu_ffn_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
        let one = tape.constant(Tensor::eye(1));
        let y = gelu_ffn(&mut tape, x, one, one, FfnDropout::NONE, None).unwrap();
        assert_abs_diff_eq!(tape.value(y).data()[0], 2.996363, epsilon = 1e-6);
        let zero = tape.constant(Tensor::zeros(vec![1, 1]));
        let y = gelu_ffn(&mut tape, x, zero, one, FfnDropout::NONE, None).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
    }
}
