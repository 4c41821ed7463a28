//! Stationary covariance kernels on scalar (time) inputs and their sum/product
//! algebra.
//!
//! Every primitive is written as a function of the signed offset `τ = x − x'`
//! so that derivatives with respect to either input are smooth at `τ = 0`.
//! Hyperparameters live in an unconstrained vector; the constrained value of
//! each is `softplus(u)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Matern32,
    Rbf,
    RationalQuadratic,
    Periodic,
}

impl Primitive {
    /// Number of hyperparameters: variance, lengthscale and (α | period).
    pub fn num_params(self) -> usize {
        match self {
            Primitive::Matern32 | Primitive::Rbf => 2,
            Primitive::RationalQuadratic | Primitive::Periodic => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Matern32 => "matern32",
            Primitive::Rbf => "rbf",
            Primitive::RationalQuadratic => "rational_quadratic",
            Primitive::Periodic => "periodic",
        }
    }

    /// (k, ∂k/∂τ)
    fn value_dtau(self, p: &[f64], tau: f64) -> (f64, f64) {
        let var = p[0];
        let ls = p[1];
        match self {
            Primitive::Rbf => {
                let k = var * (-0.5 * tau * tau / (ls * ls)).exp();
                (k, -k * tau / (ls * ls))
            }
            Primitive::Matern32 => {
                let s = 3f64.sqrt() * tau.abs() / ls;
                let e = (-s).exp();
                (var * (1.0 + s) * e, -var * 3.0 * tau / (ls * ls) * e)
            }
            Primitive::RationalQuadratic => {
                let alpha = p[2];
                let q = 1.0 + tau * tau / (2.0 * alpha * ls * ls);
                let k = var * q.powf(-alpha);
                (k, -var * q.powf(-alpha - 1.0) * tau / (ls * ls))
            }
            Primitive::Periodic => {
                let period = p[2];
                let u = std::f64::consts::PI * tau / period;
                let s = u.sin();
                let k = var * (-2.0 * s * s / (ls * ls)).exp();
                let dk_du = k * (-4.0 * s * u.cos() / (ls * ls));
                (k, dk_du * std::f64::consts::PI / period)
            }
        }
    }

    /// Adds `weight * ∂k/∂p` (constrained parameters) into `out`.
    fn accumulate_param_grad(self, p: &[f64], tau: f64, weight: f64, out: &mut [f64]) {
        let var = p[0];
        let ls = p[1];
        match self {
            Primitive::Rbf => {
                let k = var * (-0.5 * tau * tau / (ls * ls)).exp();
                out[0] += weight * k / var;
                out[1] += weight * k * tau * tau / (ls * ls * ls);
            }
            Primitive::Matern32 => {
                let s = 3f64.sqrt() * tau.abs() / ls;
                let e = (-s).exp();
                out[0] += weight * (1.0 + s) * e;
                out[1] += weight * var * s * s * e / ls;
            }
            Primitive::RationalQuadratic => {
                let alpha = p[2];
                let q = 1.0 + tau * tau / (2.0 * alpha * ls * ls);
                let k = var * q.powf(-alpha);
                out[0] += weight * k / var;
                out[1] += weight * var * q.powf(-alpha - 1.0) * tau * tau / (ls * ls * ls);
                out[2] += weight * k * (-q.ln() + (q - 1.0) / q);
            }
            Primitive::Periodic => {
                let period = p[2];
                let u = std::f64::consts::PI * tau / period;
                let s = u.sin();
                let k = var * (-2.0 * s * s / (ls * ls)).exp();
                out[0] += weight * k / var;
                out[1] += weight * k * 4.0 * s * s / (ls * ls * ls);
                let dk_du = k * (-4.0 * s * u.cos() / (ls * ls));
                out[2] += weight * dk_du * (-u / period);
            }
        }
    }
}

/// Kernel expression tree. Leaves index into [`KernelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    Leaf { kind: Primitive, offset: usize },
    Sum(Vec<KernelSpec>),
    Product(Vec<KernelSpec>),
}

pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else if u < -30.0 {
        u.exp()
    } else {
        u.exp().ln_1p()
    }
}

pub fn softplus_inv(c: f64) -> f64 {
    debug_assert!(c > 0.0);
    if c > 30.0 {
        c + (-(-c).exp()).ln_1p()
    } else {
        c.exp_m1().ln()
    }
}

/// d softplus / du
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Unconstrained kernel hyperparameters θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub unconstrained: Vec<f64>,
}

impl KernelParams {
    pub fn from_constrained(values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "kernel hyperparameters must be positive and finite, got {v}"
            )));
        }
        Ok(Self {
            unconstrained: values.iter().map(|&c| softplus_inv(c)).collect(),
        })
    }

    pub fn constrained(&self) -> Vec<f64> {
        self.unconstrained.iter().map(|&u| softplus(u)).collect()
    }

    pub fn len(&self) -> usize {
        self.unconstrained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unconstrained.is_empty()
    }
}

impl KernelSpec {
    pub fn leaf(kind: Primitive, offset: usize) -> Self {
        KernelSpec::Leaf { kind, offset }
    }

    /// Matern 3/2 + rational quadratic + RBF + periodic × RBF, with parameters
    /// laid out leaf by leaf in that order.
    pub fn default_composite() -> (Self, KernelParams) {
        let spec = KernelSpec::Sum(vec![
            KernelSpec::leaf(Primitive::Matern32, 0),
            KernelSpec::leaf(Primitive::RationalQuadratic, 2),
            KernelSpec::leaf(Primitive::Rbf, 5),
            KernelSpec::Product(vec![
                KernelSpec::leaf(Primitive::Periodic, 7),
                KernelSpec::leaf(Primitive::Rbf, 10),
            ]),
        ]);
        let values = [
            1.0, 0.2, // matern32
            1.0, 0.2, 1.0, // rational quadratic
            1.0, 0.2, // rbf
            1.0, 0.2, 0.5, // periodic
            1.0, 0.2, // rbf (periodic envelope)
        ];
        let params = KernelParams::from_constrained(&values).expect("positive defaults");
        (spec, params)
    }

    /// Total number of parameters referenced by the tree (max leaf end).
    pub fn num_params(&self) -> usize {
        match self {
            KernelSpec::Leaf { kind, offset } => offset + kind.num_params(),
            KernelSpec::Sum(cs) | KernelSpec::Product(cs) => {
                cs.iter().map(|c| c.num_params()).max().unwrap_or(0)
            }
        }
    }

    pub fn validate(&self, params: &KernelParams) -> Result<()> {
        match self {
            KernelSpec::Leaf { kind, offset } => {
                if offset + kind.num_params() > params.len() {
                    return Err(Error::invalid(format!(
                        "{} leaf at offset {offset} exceeds {} parameters",
                        kind.name(),
                        params.len()
                    )));
                }
                Ok(())
            }
            KernelSpec::Sum(cs) | KernelSpec::Product(cs) => {
                if cs.is_empty() {
                    return Err(Error::invalid("empty sum/product kernel node"));
                }
                cs.iter().try_for_each(|c| c.validate(params))
            }
        }
    }

    fn value_dtau(&self, p: &[f64], tau: f64) -> (f64, f64) {
        match self {
            KernelSpec::Leaf { kind, offset } => kind.value_dtau(&p[*offset..], tau),
            KernelSpec::Sum(cs) => cs.iter().fold((0.0, 0.0), |(k, d), c| {
                let (kc, dc) = c.value_dtau(p, tau);
                (k + kc, d + dc)
            }),
            KernelSpec::Product(cs) => cs.iter().fold((1.0, 0.0), |(k, d), c| {
                let (kc, dc) = c.value_dtau(p, tau);
                (k * kc, d * kc + k * dc)
            }),
        }
    }

    fn accumulate(&self, p: &[f64], tau: f64, weight: f64, out: &mut [f64]) {
        match self {
            KernelSpec::Leaf { kind, offset } => {
                let n = kind.num_params();
                kind.accumulate_param_grad(
                    &p[*offset..*offset + n],
                    tau,
                    weight,
                    &mut out[*offset..*offset + n],
                )
            }
            KernelSpec::Sum(cs) => cs.iter().for_each(|c| c.accumulate(p, tau, weight, out)),
            KernelSpec::Product(cs) => {
                let values: Vec<f64> = cs.iter().map(|c| c.value_dtau(p, tau).0).collect();
                for (i, c) in cs.iter().enumerate() {
                    let others: f64 = values
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, v)| v)
                        .product();
                    c.accumulate(p, tau, weight * others, out);
                }
            }
        }
    }
}

/// A kernel expression bound to its constrained hyperparameter values, ready
/// for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Kernel<'a> {
    spec: &'a KernelSpec,
    params: &'a KernelParams,
    values: Vec<f64>,
}

impl<'a> Kernel<'a> {
    pub fn new(spec: &'a KernelSpec, params: &'a KernelParams) -> Result<Self> {
        spec.validate(params)?;
        Ok(Self {
            spec,
            params,
            values: params.constrained(),
        })
    }

    pub fn eval(&self, x: f64, xp: f64) -> Result<f64> {
        if !x.is_finite() || !xp.is_finite() {
            return Err(Error::invalid(format!("non-finite kernel input ({x}, {xp})")));
        }
        Ok(self.spec.value_dtau(&self.values, x - xp).0)
    }

    /// (κ(x, x'), ∂κ/∂x)
    pub fn eval_dx(&self, x: f64, xp: f64) -> (f64, f64) {
        self.spec.value_dtau(&self.values, x - xp)
    }

    /// ∂κ(x, x')/∂u for the unconstrained parameters, added into `out` with `weight`.
    pub fn accumulate_param_grad(&self, x: f64, xp: f64, weight: f64, out: &mut [f64]) {
        let mut constrained = vec![0.0; self.values.len()];
        self.spec
            .accumulate(&self.values, x - xp, weight, &mut constrained);
        for ((o, c), u) in out
            .iter_mut()
            .zip(&constrained)
            .zip(&self.params.unconstrained)
        {
            *o += c * sigmoid(*u);
        }
    }

    pub fn matrix(&self, xa: &[f64], xb: &[f64]) -> Result<DMatrix<f64>> {
        if xa.is_empty() || xb.is_empty() {
            return Err(Error::invalid("kernel matrix needs non-empty inputs"));
        }
        if let Some(v) = xa.iter().chain(xb).find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite kernel input {v}")));
        }
        let mut k = DMatrix::from_fn(xa.len(), xb.len(), |i, j| {
            self.spec.value_dtau(&self.values, xa[i] - xb[j]).0
        });
        if std::ptr::eq(xa, xb) || xa == xb {
            for i in 0..k.nrows() {
                for j in 0..i {
                    let v = 0.5 * (k[(i, j)] + k[(j, i)]);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
        }
        Ok(k)
    }

    /// Back-propagates a cotangent `k_bar` on `matrix(xa, xb)` into the
    /// unconstrained parameters and both input lists.
    pub fn matrix_backward(
        &self,
        xa: &[f64],
        xb: &[f64],
        k_bar: &DMatrix<f64>,
        theta_bar: &mut [f64],
        mut xa_bar: Option<&mut [f64]>,
        mut xb_bar: Option<&mut [f64]>,
    ) {
        let mut constrained = vec![0.0; self.values.len()];
        for j in 0..xb.len() {
            for i in 0..xa.len() {
                let w = k_bar[(i, j)];
                if w == 0.0 {
                    continue;
                }
                let tau = xa[i] - xb[j];
                self.spec.accumulate(&self.values, tau, w, &mut constrained);
                if xa_bar.is_some() || xb_bar.is_some() {
                    let d = self.spec.value_dtau(&self.values, tau).1;
                    if let Some(a) = xa_bar.as_deref_mut() {
                        a[i] += w * d;
                    }
                    if let Some(b) = xb_bar.as_deref_mut() {
                        b[j] -= w * d;
                    }
                }
            }
        }
        for ((o, c), u) in theta_bar
            .iter_mut()
            .zip(&constrained)
            .zip(&self.params.unconstrained)
        {
            *o += c * sigmoid(*u);
        }
    }
}

pub fn eval_kernel(spec: &KernelSpec, params: &KernelParams, x: f64, xp: f64) -> Result<f64> {
    Kernel::new(spec, params)?.eval(x, xp)
}

pub fn kernel_matrix(
    spec: &KernelSpec,
    params: &KernelParams,
    xa: &[f64],
    xb: &[f64],
) -> Result<DMatrix<f64>> {
    Kernel::new(spec, params)?.matrix(xa, xb)
}

/// Config-file form of a kernel: nested `{op, terms}` nodes with leaf
/// `{kind, variance, lengthscale, alpha?, period?}` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelExpr {
    Node {
        op: String,
        terms: Vec<KernelExpr>,
    },
    Leaf {
        kind: String,
        #[serde(default = "default_variance")]
        variance: f64,
        #[serde(default = "default_lengthscale")]
        lengthscale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        period: Option<f64>,
    },
}

fn default_variance() -> f64 {
    1.0
}
fn default_lengthscale() -> f64 {
    0.2
}

impl KernelExpr {
    pub fn default_composite() -> Self {
        let leaf = |kind: &str, alpha: Option<f64>, period: Option<f64>| KernelExpr::Leaf {
            kind: kind.into(),
            variance: 1.0,
            lengthscale: 0.2,
            alpha,
            period,
        };
        KernelExpr::Node {
            op: "sum".into(),
            terms: vec![
                leaf("matern32", None, None),
                leaf("rational_quadratic", Some(1.0), None),
                leaf("rbf", None, None),
                KernelExpr::Node {
                    op: "product".into(),
                    terms: vec![leaf("periodic", None, Some(0.5)), leaf("rbf", None, None)],
                },
            ],
        }
    }

    pub fn compile(&self) -> Result<(KernelSpec, KernelParams)> {
        let mut values = Vec::new();
        let spec = self.compile_into(&mut values)?;
        Ok((spec, KernelParams::from_constrained(&values)?))
    }

    fn compile_into(&self, values: &mut Vec<f64>) -> Result<KernelSpec> {
        match self {
            KernelExpr::Node { op, terms } => {
                if terms.is_empty() {
                    return Err(Error::config("kernel.terms", "empty kernel node"));
                }
                let children = terms
                    .iter()
                    .map(|t| t.compile_into(values))
                    .collect::<Result<Vec<_>>>()?;
                match op.as_str() {
                    "sum" => Ok(KernelSpec::Sum(children)),
                    "product" => Ok(KernelSpec::Product(children)),
                    other => Err(Error::config(
                        "kernel.op",
                        format!("unknown operator `{other}` (expected sum | product)"),
                    )),
                }
            }
            KernelExpr::Leaf {
                kind,
                variance,
                lengthscale,
                alpha,
                period,
            } => {
                let kind = match kind.as_str() {
                    "matern32" => Primitive::Matern32,
                    "rbf" => Primitive::Rbf,
                    "rational_quadratic" | "rq" => Primitive::RationalQuadratic,
                    "periodic" => Primitive::Periodic,
                    other => {
                        return Err(Error::config(
                            "kernel.kind",
                            format!("unknown kernel `{other}`"),
                        ))
                    }
                };
                let offset = values.len();
                values.push(*variance);
                values.push(*lengthscale);
                match kind {
                    Primitive::RationalQuadratic => values.push(alpha.unwrap_or(1.0)),
                    Primitive::Periodic => values.push(period.unwrap_or(0.5)),
                    _ => {}
                }
                if let Some(bad) = values[offset..].iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::config(
                        format!("kernel.{}", kind.name()),
                        format!("hyperparameters must be positive, got {bad}"),
                    ));
                }
                Ok(KernelSpec::leaf(kind, offset))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn single(kind: Primitive, values: &[f64]) -> (KernelSpec, KernelParams) {
        (
            KernelSpec::leaf(kind, 0),
            KernelParams::from_constrained(values).unwrap(),
        )
    }

    #[test]
    fn rbf_at_zero_distance_is_variance() {
        let (s, p) = single(Primitive::Rbf, &[1.0, 0.37]);
        assert_eq!(eval_kernel(&s, &p, 0.4, 0.4).unwrap(), 1.0);
    }

    #[test]
    fn matern_at_zero_distance_is_variance() {
        let (s, p) = single(Primitive::Matern32, &[2.0, 0.3]);
        assert_relative_eq!(eval_kernel(&s, &p, 0.1, 0.1).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn sum_matches_closed_forms() {
        let spec = KernelSpec::Sum(vec![
            KernelSpec::leaf(Primitive::Rbf, 0),
            KernelSpec::leaf(Primitive::Matern32, 2),
        ]);
        let p = KernelParams::from_constrained(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        let r: f64 = 0.5;
        let rbf = (-r * r / 2.0).exp();
        let s = 3f64.sqrt() * r;
        let matern = (1.0 + s) * (-s).exp();
        assert_relative_eq!(
            eval_kernel(&spec, &p, 0.2, 0.7).unwrap(),
            rbf + matern,
            epsilon = 1e-12
        );
    }

    #[test]
    fn non_finite_input_rejected() {
        let (s, p) = KernelSpec::default_composite();
        assert!(matches!(
            eval_kernel(&s, &p, f64::NAN, 0.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_point_gram() {
        let (s, p) = single(Primitive::Rbf, &[1.0, 1.0]);
        let k = kernel_matrix(&s, &p, &[0.3], &[0.3]).unwrap();
        assert_eq!(k, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn composite_gram_matches_scalar_loop() {
        let (s, p) = KernelSpec::default_composite();
        let xs = [0.05, 0.31, 0.47, 0.62, 0.93];
        let k = kernel_matrix(&s, &p, &xs, &xs).unwrap();
        // independent scalar oracle from the textbook formulas
        let c = p.constrained();
        let oracle = |r: f64| {
            let m = {
                let s = 3f64.sqrt() * r / c[1];
                c[0] * (1.0 + s) * (-s).exp()
            };
            let rq = c[2] * (1.0 + r * r / (2.0 * c[4] * c[3] * c[3])).powf(-c[4]);
            let rbf = c[5] * (-r * r / (2.0 * c[6] * c[6])).exp();
            let per = c[7]
                * (-2.0 * (std::f64::consts::PI * r / c[9]).sin().powi(2) / (c[8] * c[8])).exp();
            let env = c[10] * (-r * r / (2.0 * c[11] * c[11])).exp();
            m + rq + rbf + per * env
        };
        for i in 0..5 {
            for j in 0..5 {
                assert_relative_eq!(k[(i, j)], oracle((xs[i] - xs[j]).abs()), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn distinct_points_gram_is_psd() {
        let (s, p) = KernelSpec::default_composite();
        let xs: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let k = kernel_matrix(&s, &p, &xs, &xs).unwrap();
        let eig = nalgebra::SymmetricEigen::new(k).eigenvalues;
        assert!(eig.min() >= -1e-10);
    }

    #[test]
    fn softplus_round_trip() {
        for c in [1e-8, 1e-3, 0.2, 1.0, 17.0, 45.0, 1e3] {
            assert_relative_eq!(softplus(softplus_inv(c)), c, max_relative = 1e-12);
        }
    }

    #[test]
    fn config_expression_compiles_to_default() {
        let (spec, params) = KernelExpr::default_composite().compile().unwrap();
        let (s2, p2) = KernelSpec::default_composite();
        assert_eq!(spec, s2);
        for (a, b) in params.unconstrained.iter().zip(&p2.unconstrained) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn unknown_operator_is_config_error() {
        let e = KernelExpr::Node {
            op: "minus".into(),
            terms: vec![KernelExpr::default_composite()],
        };
        assert!(matches!(e.compile(), Err(Error::Config { .. })));
    }

    fn fd_check(kind: Primitive, seed: u64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let values: Vec<f64> = (0..kind.num_params())
                .map(|_| rng.random_range(0.2..2.0))
                .collect();
            let spec = KernelSpec::leaf(kind, 0);
            let params = KernelParams::from_constrained(&values).unwrap();
            let x = rng.random_range(0.0..1.0);
            let xp = rng.random_range(0.0..1.0);
            let kern = Kernel::new(&spec, &params).unwrap();
            let mut grad = vec![0.0; values.len()];
            kern.accumulate_param_grad(x, xp, 1.0, &mut grad);
            let h = 1e-5;
            for i in 0..values.len() {
                let mut up = params.clone();
                up.unconstrained[i] += h;
                let mut dn = params.clone();
                dn.unconstrained[i] -= h;
                let fd = (eval_kernel(&spec, &up, x, xp).unwrap()
                    - eval_kernel(&spec, &dn, x, xp).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(grad[i].abs()).max(1e-6),
                    "{kind:?} param {i}: fd {fd} vs {}",
                    grad[i]
                );
            }
            let (_, dx) = kern.eval_dx(x, xp);
            let fd = (kern.eval(x + h, xp).unwrap() - kern.eval(x - h, xp).unwrap()) / (2.0 * h);
            assert!((fd - dx).abs() <= 1e-4 * fd.abs().max(1e-8), "{kind:?} dx");
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        fd_check(Primitive::Rbf, 1);
        fd_check(Primitive::Matern32, 2);
        fd_check(Primitive::RationalQuadratic, 3);
        fd_check(Primitive::Periodic, 4);
    }

    proptest! {
        #[test]
        fn jittered_gram_admits_cholesky(
            xs in prop::collection::vec(0.0f64..1.0, 1..20),
            logs in prop::collection::vec(-1.5f64..1.0, 12),
        ) {
            let (spec, _) = KernelSpec::default_composite();
            let values: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
            let params = KernelParams::from_constrained(&values).unwrap();
            let k = kernel_matrix(&spec, &params, &xs, &xs).unwrap();
            prop_assert_eq!(k.clone(), k.transpose());
            prop_assert!(crate::linalg::jittered_cholesky(&k, "K").is_ok());
        }
    }
}
