//! Central finite-difference verification of tape gradients.

use super::{Graph, ParamStore, Result, Scalar, Tensor, Var};

/// A scalar-valued function that can be recorded at any precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every checked coordinate.
    pub max_rel_error: f64,
    /// Label of the tensor holding the worst coordinate, and its flat index.
    pub worst: (String, usize),
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor: gradients smaller than this are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_per_tensor: Option<usize>,
}

fn coords(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

fn eval_f64<F: ScalarFn>(f: &F, params: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f.eval(&mut g, &vars)?;
    Ok(g.scalar_value(out))
}

/// Compares the tape gradient at precision `T` with central differences of
/// the same function evaluated in 64-bit, over every input coordinate and
/// every trainable parameter coordinate.
pub fn gradient_check<T: Scalar, F: ScalarFn>(
    f: &F,
    params: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let params_t: ParamStore<T> = params.cast();
    let (input_grads, param_grads) = {
        let mut g = Graph::new(&params_t);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.cast())).collect();
        let out = f.eval(&mut g, &vars)?;
        let grads = g.backward(out)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| match grads.wrt(v) {
                Some(d) => d.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; t.len()],
            })
            .collect();
        let pg: Vec<Option<Vec<f64>>> = grads
            .into_param_grads()
            .into_iter()
            .map(|o| o.map(|d| d.iter().map(|x| x.as_f64()).collect()))
            .collect();
        (ig, pg)
    };

    let mut worst = (String::new(), 0);
    let mut max_err = 0.0f64;
    let mut count = 0;
    let mut record = |label: &str, i: usize, a: f64, n: f64| {
        let e = relative_error(a, n);
        count += 1;
        if e > max_err || (e.is_nan() && !max_err.is_nan()) {
            max_err = e;
            worst = (label.to_string(), i);
        }
    };

    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in coords(t.len(), opts.max_per_tensor) {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + opts.h;
            let fp = eval_f64(f, params, &work)?;
            work[ti].data_mut()[i] = orig - opts.h;
            let fm = eval_f64(f, params, &work)?;
            work[ti].data_mut()[i] = orig;
            record(&format!("input{ti}"), i, input_grads[ti][i], (fp - fm) / (2.0 * opts.h));
        }
    }

    let mut pwork = params.clone();
    for id in params.ids() {
        if !params.is_trainable(id) {
            continue;
        }
        let len = params.get(id).len();
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| vec![0.0; len]);
        for i in coords(len, opts.max_per_tensor) {
            let orig = params.get(id).data()[i];
            pwork.get_mut(id).data_mut()[i] = orig + opts.h;
            let fp = eval_f64(f, &pwork, inputs)?;
            pwork.get_mut(id).data_mut()[i] = orig - opts.h;
            let fm = eval_f64(f, &pwork, inputs)?;
            pwork.get_mut(id).data_mut()[i] = orig;
            record(params.name(id), i, analytic[i], (fp - fm) / (2.0 * opts.h));
        }
    }

    Ok(GradCheckReport {
        max_rel_error: max_err,
        worst,
        coordinates: count,
        tolerance: opts.tol,
        passed: max_err <= opts.tol,
    })
}
