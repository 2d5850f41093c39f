use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NdArray, ParamStore};
use crate::error::{Error, Result};

/// A differentiable operation with an explicit vector-Jacobian product.
///
/// Multi-output ops concatenate their outputs into one array; parameters are
/// passed as ordinary inputs.
pub trait DiffOp {
    fn forward(&self, inputs: &[NdArray]) -> Result<NdArray>;

    /// Cotangents for every input, in input order.
    fn backward(&self, inputs: &[NdArray], cotangent: &NdArray) -> Result<Vec<NdArray>>;
}

/// Closure-backed [`DiffOp`].
pub struct FnOp<F, B> {
    pub forward: F,
    pub backward: B,
}

impl<F, B> FnOp<F, B>
where
    F: Fn(&[NdArray]) -> Result<NdArray>,
    B: Fn(&[NdArray], &NdArray) -> Result<Vec<NdArray>>,
{
    pub fn new(forward: F, backward: B) -> Self {
        Self { forward, backward }
    }
}

impl<F, B> DiffOp for FnOp<F, B>
where
    F: Fn(&[NdArray]) -> Result<NdArray>,
    B: Fn(&[NdArray], &NdArray) -> Result<Vec<NdArray>>,
{
    fn forward(&self, inputs: &[NdArray]) -> Result<NdArray> {
        (self.forward)(inputs)
    }

    fn backward(&self, inputs: &[NdArray], cotangent: &NdArray) -> Result<Vec<NdArray>> {
        (self.backward)(inputs, cotangent)
    }
}

/// Adapts a layer whose parameters live in a [`ParamStore`] to [`DiffOp`].
///
/// Inputs are the layer's data inputs followed by every parameter of the
/// store in iteration order. `backward` must accumulate parameter cotangents
/// into the store and return the data-input cotangents.
pub struct ParamOp<F, B> {
    store: ParamStore,
    n_data: usize,
    forward: F,
    backward: B,
}

impl<F, B> ParamOp<F, B>
where
    F: Fn(&ParamStore, &[NdArray]) -> Result<NdArray>,
    B: Fn(&mut ParamStore, &[NdArray], &NdArray) -> Result<Vec<NdArray>>,
{
    pub fn new(store: ParamStore, n_data: usize, forward: F, backward: B) -> Self {
        Self {
            store,
            n_data,
            forward,
            backward,
        }
    }

    /// Data inputs followed by the store's current parameter values.
    pub fn point(&self, data: &[NdArray]) -> Vec<NdArray> {
        data.iter()
            .cloned()
            .chain(self.store.iter().map(|(_, p)| p.value.clone()))
            .collect()
    }

    fn bind(&self, inputs: &[NdArray]) -> Result<ParamStore> {
        let mut store = self.store.clone();
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        if inputs.len() != self.n_data + names.len() {
            return Err(Error::Shape(format!(
                "ParamOp expects {} inputs, got {}",
                self.n_data + names.len(),
                inputs.len()
            )));
        }
        for (name, v) in names.iter().zip(&inputs[self.n_data..]) {
            store.set_value(name, v.clone())?;
        }
        store.zero_grads();
        Ok(store)
    }
}

impl<F, B> DiffOp for ParamOp<F, B>
where
    F: Fn(&ParamStore, &[NdArray]) -> Result<NdArray>,
    B: Fn(&mut ParamStore, &[NdArray], &NdArray) -> Result<Vec<NdArray>>,
{
    fn forward(&self, inputs: &[NdArray]) -> Result<NdArray> {
        let store = self.bind(inputs)?;
        (self.forward)(&store, &inputs[..self.n_data])
    }

    fn backward(&self, inputs: &[NdArray], cotangent: &NdArray) -> Result<Vec<NdArray>> {
        let mut store = self.bind(inputs)?;
        let mut grads = (self.backward)(&mut store, &inputs[..self.n_data], cotangent)?;
        grads.extend(store.iter().map(|(_, p)| p.grad.clone()));
        Ok(grads)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

const PROJECTION_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

/// Central-difference gradient check over every coordinate of every input.
///
/// The output is scalarized with a fixed random projection `r`, so the
/// analytic gradient is `backward(r)` and the numeric one is
/// `(r·f(x+eps) − r·f(x−eps)) / (2·eps)`.
pub fn gradcheck(op: &dyn DiffOp, point: &[NdArray], eps: f64) -> Result<GradcheckReport> {
    gradcheck_sampled(op, point, eps, usize::MAX)
}

/// Like [`gradcheck`] but checks at most `max_per_input` evenly strided
/// coordinates of each input.
pub fn gradcheck_sampled(
    op: &dyn DiffOp,
    point: &[NdArray],
    eps: f64,
    max_per_input: usize,
) -> Result<GradcheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "gradcheck eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    if point.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidArgument(
            "gradcheck point has non-finite inputs".into(),
        ));
    }
    let y0 = op.forward(point)?;
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let proj = NdArray::from_fn(y0.shape(), |_| rng.random_range(-1.0..1.0));
    let analytic = op.backward(point, &proj)?;
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "backward returned {} cotangents for {} inputs",
            analytic.len(),
            point.len()
        )));
    }

    let mut work: Vec<NdArray> = point.to_vec();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (i, grad) in analytic.iter().enumerate() {
        grad.ensure_shape(point[i].shape(), "gradcheck cotangent")?;
        let n = point[i].len();
        let stride = n.div_ceil(max_per_input.min(n)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let fp = op.forward(&work)?.dot(&proj)?;
            work[i].data_mut()[j] = orig - eps;
            let fm = op.forward(&work)?.dot(&proj)?;
            work[i].data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::GradcheckNonFinite { input: i, index: j });
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let op = FnOp::new(
            |x: &[NdArray]| Ok(x[0].map(|v| v * v)),
            |x: &[NdArray], dy: &NdArray| Ok(vec![x[0].zip_map(dy, |v, g| 2.0 * v * g)?]),
        );
        let r = gradcheck(&op, &[NdArray::scalar(3.0)], 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn sum_is_all_ones() {
        let op = FnOp::new(
            |x: &[NdArray]| Ok(NdArray::scalar(x[0].sum())),
            |x: &[NdArray], dy: &NdArray| Ok(vec![NdArray::full(x[0].shape(), dy.data()[0])]),
        );
        let x = NdArray::from_fn(&[7], |i| i as f64 * 0.3 - 1.0);
        let r = gradcheck(&op, &[x], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-10, "{}", r.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let op = FnOp::new(
            |x: &[NdArray]| Ok(x[0].map(|v| v * v)),
            |x: &[NdArray], dy: &NdArray| Ok(vec![x[0].zip_map(dy, |v, g| 3.0 * v * g)?]),
        );
        let r = gradcheck(&op, &[NdArray::scalar(2.0)], 1e-4).unwrap();
        assert!(r.max_rel_err > 0.1);
    }

    #[test]
    fn non_finite_perturbation_reports_coordinate() {
        // ln(x) at x = 1e-5 with eps = 1e-4 steps into negative territory.
        let op = FnOp::new(
            |x: &[NdArray]| Ok(x[0].map(f64::ln)),
            |x: &[NdArray], dy: &NdArray| Ok(vec![x[0].zip_map(dy, |v, g| g / v)?]),
        );
        let x = NdArray::new(&[2], vec![1.0, 1e-5]).unwrap();
        match gradcheck(&op, &[x], 1e-4) {
            Err(Error::GradcheckNonFinite { input: 0, index: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn eps_range_enforced() {
        let op = FnOp::new(
            |x: &[NdArray]| Ok(x[0].clone()),
            |_: &[NdArray], dy: &NdArray| Ok(vec![dy.clone()]),
        );
        assert!(gradcheck(&op, &[NdArray::scalar(1.0)], 1e-2).is_err());
    }
}
