use crate::error::{Result, TensorError};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar from the input variable on the supplied tape. Both the
/// analytic and the finite-difference side run in `f64`, so the reported
/// error reflects the op implementations rather than `f32` rounding.
///
/// Returns `max_i |a_i - c_i| / max(|a_i|, |c_i|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// [`grad_check`] restricted to the listed input coordinates, for graphs too
/// expensive to probe exhaustively.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f32, coords: &[usize]) -> Result<f32>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if let Some(&bad) = coords.iter().find(|&&i| i >= x.numel()) {
        return Err(TensorError::invalid(format!("grad_check: coordinate {bad} out of range")));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(TensorError::invalid(format!("grad_check: eps must be > 0, got {eps}")));
    }
    let x64: Tensor<f64> = x.cast();
    let tape = Tape::<f64>::new();

    let eval = |input: Tensor<f64>| -> Result<f64> {
        tape.reset();
        let v = tape.constant(input)?;
        f(&tape, v)?.item()
    };

    // Analytic side.
    tape.reset();
    let xv = tape.param(x64.clone())?;
    let root = f(&tape, xv)?;
    let first = root.item()?;
    tape.backward(root)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![0.0; x64.numel()]);

    let second = eval(x64.clone())?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let h = eps as f64;
    let mut worst = 0.0f64;
    for &i in coords {
        let a = analytic[i];
        let mut plus = x64.clone();
        plus.data_mut()[i] += h;
        let mut minus = x64.clone();
        minus.data_mut()[i] -= h;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst as f32)
}

/// One named scalar-valued probe of a single differentiable op.
pub struct OpCase {
    pub name: &'static str,
    pub input: Tensor,
    #[allow(clippy::type_complexity)]
    f: Box<dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>>,
}

impl OpCase {
    pub fn check(&self, eps: f32) -> Result<f32> {
        grad_check(&self.f, &self.input, eps)
    }
}

/// Pushes `x` away from a kink at `at` by at least `gap`.
fn away(x: f32, at: f32, gap: f32) -> f32 {
    if (x - at).abs() < gap {
        at + gap.copysign(x - at)
    } else {
        x
    }
}

/// Random small problems covering every differentiable op on the tape.
///
/// Each case contracts the op output against fixed random weights, so every
/// input coordinate gets a generic, non-degenerate gradient.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let mut cases = Vec::new();
    let mut add = |name: &'static str, input: Tensor, f: Box<dyn for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>>| {
        cases.push(OpCase { name, input, f });
    };
    let mut draw = |shape: &[usize]| -> Tensor { rng.uniform_tensor::<f32>(shape.to_vec(), -1.0, 1.0) };

    // Contract against weights so the root is a generic scalar.
    fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
        let w = tape.constant(w.clone().reshape(y.shape())?)?;
        y.mul(w)?.sum()
    }
    macro_rules! case {
        ($name:expr, $shape:expr, $out:expr, |$t:ident, $x:ident| $body:expr) => {{
            let input = draw(&$shape);
            let w: Tensor<f64> = draw(&[$out]).cast();
            add(
                $name,
                input,
                Box::new(move |$t, $x| {
                    let y = $body?;
                    weighted($t, y, &w)
                }),
            );
        }};
    }

    let other: Tensor<f64> = draw(&[3, 4]).cast();
    let row: Tensor<f64> = draw(&[4]).cast();
    let (o1, o2, o3) = (other.clone(), other.clone(), row.clone());
    case!("add", [3, 4], 12, |t, x| x.add(t.constant(o1.clone())?));
    case!("sub", [3, 4], 12, |t, x| t.constant(o2.clone())?.sub(x));
    case!("mul", [3, 4], 12, |t, x| x.mul(t.constant(other.clone())?));
    case!("mul_broadcast_row", [3, 4], 12, |t, x| x.mul(t.constant(o3.clone())?));
    let m34: Tensor<f64> = draw(&[3, 4]).cast();
    case!("mul_broadcast_rhs_grad", [4], 12, |t, x| t.constant(m34.clone())?.mul(x));
    let wide = Tensor::<f64>::zeros(vec![3, 4]);
    case!("add_broadcast_unit", [3, 1], 12, |t, x| t.constant(wide.clone())?.add(x));
    case!("scale", [5], 5, |_t, x| x.scale(-1.7));
    case!("add_scalar", [5], 5, |_t, x| x.add_scalar(0.3)?.square());
    case!("neg", [5], 5, |_t, x| x.neg()?.exp());
    // Shifted clear of the stationary point near -0.75, where the relative error is ill-conditioned.
    case!("gelu", [6], 6, |_t, x| x.scale(1.5)?.add_scalar(1.0)?.gelu());
    case!("silu", [6], 6, |_t, x| x.scale(1.5)?.add_scalar(0.5)?.silu());
    case!("exp", [6], 6, |_t, x| x.exp());
    case!("sqrt", [6], 6, |_t, x| x.square()?.add_scalar(0.5)?.sqrt());
    {
        let input = draw(&[6]).map(|v| away(v, 0.0, 0.05));
        let w: Tensor<f64> = draw(&[6]).cast();
        add("relu", input, Box::new(move |t, x| weighted(t, x.relu()?, &w)));
    }
    {
        let input = draw(&[6]).map(|v| away(away(v * 1.5, -0.5, 0.05), 0.5, 0.05));
        let w: Tensor<f64> = draw(&[6]).cast();
        add("clamp", input, Box::new(move |t, x| weighted(t, x.clamp(-0.5, 0.5)?, &w)));
    }
    let b: Tensor<f64> = draw(&[4, 3]).cast();
    case!("matmul_lhs", [2, 3, 4], 18, |t, x| x.matmul(t.constant(b.clone())?));
    let a: Tensor<f64> = draw(&[5, 4]).cast();
    case!("matmul_rhs", [4, 3], 15, |t, x| t.constant(a.clone())?.matmul(x));
    let bb: Tensor<f64> = draw(&[2, 4, 3]).cast();
    case!("bmm_lhs", [2, 2, 4], 12, |t, x| x.bmm(t.constant(bb.clone())?));
    let ba: Tensor<f64> = draw(&[2, 3, 2]).cast();
    case!("bmm_rhs", [2, 2, 4], 24, |t, x| t.constant(ba.clone())?.bmm(x));
    case!("permute", [2, 3, 4], 24, |_t, x| x.permute(&[2, 0, 1]));
    case!("transpose", [3, 4], 12, |_t, x| x.transpose());
    case!("reshape", [3, 4], 12, |_t, x| x.reshape(vec![4, 3]));
    case!("narrow", [3, 5], 6, |_t, x| x.narrow(1, 2, 2));
    let side: Tensor<f64> = draw(&[3, 2]).cast();
    case!("concat", [3, 4], 18, |t, x| t.concat(&[x, t.constant(side.clone())?], 1));
    case!("softmax", [6], 6, |_t, x| x.scale(2.0)?.softmax_lastdim());
    case!("softmax_rows", [3, 5], 15, |_t, x| x.softmax_lastdim());
    case!("log_softmax", [3, 5], 15, |_t, x| x.log_softmax_lastdim());
    let gamma: Tensor<f64> = draw(&[8]).cast();
    let beta: Tensor<f64> = draw(&[8]).cast();
    case!("layer_norm", [3, 8], 24, |t, x| x.layer_norm(Some(t.constant(gamma.clone())?), Some(t.constant(beta.clone())?), 1e-5));
    let ln_x: Tensor<f64> = draw(&[3, 8]).cast();
    let ln_b: Tensor<f64> = draw(&[8]).cast();
    case!("layer_norm_gamma", [8], 24, |t, x| t.constant(ln_x.clone())?.layer_norm(Some(x), Some(t.constant(ln_b.clone())?), 1e-5));
    let ln_x2: Tensor<f64> = draw(&[3, 8]).cast();
    case!("layer_norm_beta", [8], 24, |t, x| t.constant(ln_x2.clone())?.layer_norm(None, Some(x), 1e-5));
    case!("sum", [7], 1, |_t, x| x.sum());
    case!("mean", [7], 1, |_t, x| x.mean());
    {
        // Distinct maximiser with a margin larger than any probe step.
        let mut input = draw(&[7]);
        let k = (seed as usize) % 7;
        input.data_mut()[k] = 1.5;
        add("max", input, Box::new(|_t, x| x.square()?.max()));
    }
    case!("sum_axis", [3, 4, 2], 6, |_t, x| x.sum_axis(1));
    case!("mean_axis", [3, 4], 4, |_t, x| x.mean_axis(0));
    case!("gather", [3, 4], 4, |_t, x| x.gather(&[11, 0, 5, 5]));
    case!("embedding", [5, 3], 12, |t, x| t.embedding(x, &[4, 0, 4, 2]));
    let rep: Tensor<f64> = draw(&[4, 3]).cast();
    case!("replace_rows", [4, 3], 12, |_t, x| x.replace_rows(&[true, false, true, false], &rep));
    cases
}
