use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{ActionSet, Coefficients, Exponents, InitialLaw, MeasureView, ModelError, ModelSpec};
use crate::Scalar;

pub const BUILTIN_NAMES: [&str; 3] = ["ou_chaos", "lq_meanfield", "bang_relaxed"];

/// Parameters of the scalar mean-field linear-quadratic model
///
/// ```text
/// dX = (beta X + gamma E[X] + a) dt + sigma0 dW
/// f  = -(q x^2 + q_bar (x - s E[X])^2 + r a^2) / 2
/// g  = -(q_t x^2 + q_bar_t (x - s_t E[X])^2) / 2
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LqParams<S: Scalar> {
    pub beta: S,
    pub gamma: S,
    pub sigma0: S,
    pub q: S,
    pub q_bar: S,
    pub s: S,
    pub r: S,
    pub q_t: S,
    pub q_bar_t: S,
    pub s_t: S,
    pub a_max: S,
}

impl<S: Scalar> LqParams<S> {
    pub fn defaults() -> Self {
        Self {
            beta: S::lit(0.5),
            gamma: S::lit(0.5),
            sigma0: S::lit(0.6),
            q: S::one(),
            q_bar: S::one(),
            s: S::lit(-1.0),
            r: S::one(),
            q_t: S::one(),
            q_bar_t: S::one(),
            s_t: S::lit(-1.0),
            a_max: S::lit(20.0),
        }
    }

    /// Multiplies every reward weight by `c`.
    pub fn scaled_rewards(&self, c: S) -> Self {
        Self {
            q: self.q * c,
            q_bar: self.q_bar * c,
            r: self.r * c,
            q_t: self.q_t * c,
            q_bar_t: self.q_bar_t * c,
            ..*self
        }
    }
}

/// Which builtin a model came from, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
#[serde(bound = "")]
pub enum Builtin<S: Scalar> {
    OuChaos { kappa: S, sigma0: S },
    LqMeanfield(LqParams<S>),
    BangRelaxed { eps: S },
}

struct OuChaos<S> {
    kappa: S,
    sigma0: S,
}

impl<S: Scalar> Coefficients<S> for OuChaos<S> {
    fn drift(&self, _t: S, x: &[S], m: &MeasureView<S>, _a: &[S], out: &mut [S]) {
        out[0] = self.kappa * (m.mean[0] - x[0]);
    }
    fn volatility(&self, _t: S, _x: &[S], _m: &MeasureView<S>, _a: &[S], out: &mut [S]) {
        out[0] = self.sigma0;
    }
    fn running_reward(&self, _t: S, _x: &[S], _m: &MeasureView<S>, _a: &[S]) -> S {
        S::zero()
    }
    fn terminal_reward(&self, x: &[S], m: &MeasureView<S>) -> S {
        let d = x[0] - m.mean[0];
        -d * d
    }
}

struct LqMeanfield<S: Scalar>(LqParams<S>);

impl<S: Scalar> Coefficients<S> for LqMeanfield<S> {
    fn drift(&self, _t: S, x: &[S], m: &MeasureView<S>, a: &[S], out: &mut [S]) {
        let p = &self.0;
        out[0] = p.beta * x[0] + p.gamma * m.mean[0] + a[0];
    }
    fn volatility(&self, _t: S, _x: &[S], _m: &MeasureView<S>, _a: &[S], out: &mut [S]) {
        out[0] = self.0.sigma0;
    }
    fn running_reward(&self, _t: S, x: &[S], m: &MeasureView<S>, a: &[S]) -> S {
        let p = &self.0;
        let dev = x[0] - p.s * m.mean[0];
        -S::lit(0.5) * (p.q * x[0] * x[0] + p.q_bar * dev * dev + p.r * a[0] * a[0])
    }
    fn terminal_reward(&self, x: &[S], m: &MeasureView<S>) -> S {
        let p = &self.0;
        let dev = x[0] - p.s_t * m.mean[0];
        -S::lit(0.5) * (p.q_t * x[0] * x[0] + p.q_bar_t * dev * dev)
    }
}

struct BangRelaxed<S> {
    eps: S,
}

impl<S: Scalar> Coefficients<S> for BangRelaxed<S> {
    fn drift(&self, _t: S, _x: &[S], _m: &MeasureView<S>, a: &[S], out: &mut [S]) {
        out[0] = a[0];
    }
    fn volatility(&self, _t: S, _x: &[S], _m: &MeasureView<S>, _a: &[S], out: &mut [S]) {
        out[0] = self.eps;
    }
    fn running_reward(&self, _t: S, x: &[S], _m: &MeasureView<S>, _a: &[S]) -> S {
        -x[0] * x[0]
    }
    fn terminal_reward(&self, _x: &[S], _m: &MeasureView<S>) -> S {
        S::zero()
    }
}

struct Params<'a> {
    model: &'a str,
    values: &'a BTreeMap<String, f64>,
    allowed: &'static [&'static str],
}

impl<'a> Params<'a> {
    fn new(
        model: &'a str,
        values: &'a BTreeMap<String, f64>,
        allowed: &'static [&'static str],
    ) -> Result<Self, ModelError> {
        if let Some(k) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(ModelError::InvalidParam {
                name: k.clone(),
                reason: format!("not a parameter of {model}; expected one of {allowed:?}"),
            });
        }
        Ok(Self {
            model,
            values,
            allowed,
        })
    }

    fn get<S: Scalar>(&self, name: &str, default: f64) -> Result<S, ModelError> {
        debug_assert!(self.allowed.contains(&name), "{} lacks {name}", self.model);
        let v = self.values.get(name).copied().unwrap_or(default);
        if !v.is_finite() {
            return Err(ModelError::InvalidParam {
                name: name.into(),
                reason: "must be finite".into(),
            });
        }
        Ok(S::lit(v))
    }

    fn positive<S: Scalar>(&self, name: &str, default: f64) -> Result<S, ModelError> {
        let v: S = self.get(name, default)?;
        if v > S::zero() {
            Ok(v)
        } else {
            Err(ModelError::InvalidParam {
                name: name.into(),
                reason: format!("must be > 0, got {v}"),
            })
        }
    }

    fn nonneg<S: Scalar>(&self, name: &str, default: f64) -> Result<S, ModelError> {
        let v: S = self.get(name, default)?;
        if v >= S::zero() {
            Ok(v)
        } else {
            Err(ModelError::InvalidParam {
                name: name.into(),
                reason: format!("must be >= 0, got {v}"),
            })
        }
    }

    fn initial_law<S: Scalar>(&self, mean: f64, std: f64) -> Result<InitialLaw<S>, ModelError> {
        let m: S = self.get("init_mean", mean)?;
        let s: S = self.nonneg("init_std", std)?;
        Ok(if s == S::zero() {
            InitialLaw::Dirac { point: vec![m] }
        } else {
            InitialLaw::Gaussian {
                mean: vec![m],
                std: vec![s],
            }
        })
    }
}

/// Builds one of the named reference models with parameter overrides.
///
/// * `ou_chaos`: `b = kappa (mean - x)`, `sigma = sigma0`, `f = 0`,
///   `g = -(x - mean)^2`, Gaussian initial law.
/// * `lq_meanfield`: see [`LqParams`]; actions in `[-a_max, a_max]`.
/// * `bang_relaxed`: `b = a`, `sigma = eps`, `f = -x^2`, `g = 0`,
///   `A = {-1, +1}`, started at the origin. The action set is not convex.
///
/// All three use exponents `p = 1`, `p' = 2`, `p_sigma = 0`.
pub fn builtin_model<S: Scalar>(
    name: &str,
    params: &BTreeMap<String, f64>,
) -> Result<ModelSpec<S>, ModelError> {
    let exps = Exponents::new(S::one(), S::lit(2.0), S::zero())?;
    match name {
        "ou_chaos" => {
            let p = Params::new(
                name,
                params,
                &["kappa", "sigma0", "horizon", "init_mean", "init_std"],
            )?;
            let kappa: S = p.nonneg("kappa", 1.0)?;
            let sigma0: S = p.nonneg("sigma0", 1.0)?;
            let mut m = ModelSpec::new(
                name,
                1,
                1,
                p.positive("horizon", 1.0)?,
                ActionSet::finite(vec![vec![S::zero()]])?,
                exps,
                Arc::new(OuChaos { kappa, sigma0 }),
                p.initial_law(0.0, 1.0)?,
            )?;
            m.builtin = Some(Builtin::OuChaos { kappa, sigma0 });
            Ok(m)
        }
        "lq_meanfield" => {
            let p = Params::new(
                name,
                params,
                &[
                    "beta",
                    "gamma",
                    "sigma0",
                    "q",
                    "q_bar",
                    "s",
                    "r",
                    "q_t",
                    "q_bar_t",
                    "s_t",
                    "a_max",
                    "horizon",
                    "init_mean",
                    "init_std",
                ],
            )?;
            let d = LqParams::<f64>::defaults();
            let lq = LqParams {
                beta: p.get("beta", d.beta)?,
                gamma: p.get("gamma", d.gamma)?,
                sigma0: p.nonneg("sigma0", d.sigma0)?,
                q: p.nonneg("q", d.q)?,
                q_bar: p.nonneg("q_bar", d.q_bar)?,
                s: p.get("s", d.s)?,
                r: p.positive("r", d.r)?,
                q_t: p.nonneg("q_t", d.q_t)?,
                q_bar_t: p.nonneg("q_bar_t", d.q_bar_t)?,
                s_t: p.get("s_t", d.s_t)?,
                a_max: p.positive("a_max", d.a_max)?,
            };
            lq_model(lq, p.positive("horizon", 1.0)?, p.initial_law(0.0, 0.5)?)
        }
        "bang_relaxed" => {
            let p = Params::new(name, params, &["eps", "horizon"])?;
            let eps: S = p.nonneg("eps", 0.1)?;
            let mut m = ModelSpec::new(
                name,
                1,
                1,
                p.positive("horizon", 1.0)?,
                ActionSet::finite(vec![vec![-S::one()], vec![S::one()]])?,
                exps,
                Arc::new(BangRelaxed { eps }),
                InitialLaw::Dirac {
                    point: vec![S::zero()],
                },
            )?;
            m.builtin = Some(Builtin::BangRelaxed { eps });
            Ok(m)
        }
        other => Err(ModelError::UnknownModel(other.to_string())),
    }
}

/// The linear-quadratic model for explicit parameters.
pub(crate) fn lq_model<S: Scalar>(
    lq: LqParams<S>,
    horizon: S,
    law: InitialLaw<S>,
) -> Result<ModelSpec<S>, ModelError> {
    let mut m = ModelSpec::new(
        "lq_meanfield",
        1,
        1,
        horizon,
        ActionSet::interval(-lq.a_max, lq.a_max)?,
        Exponents::new(S::one(), S::lit(2.0), S::zero())?,
        Arc::new(LqMeanfield(lq)),
        law,
    )?;
    m.builtin = Some(Builtin::LqMeanfield(lq));
    Ok(m)
}

impl<S: Scalar> ModelSpec<S> {
    /// Same linear-quadratic model with different parameters.
    pub fn with_lq_params(&self, lq: LqParams<S>) -> Result<Self, ModelError> {
        match self.builtin {
            Some(Builtin::LqMeanfield(_)) => lq_model(lq, self.horizon, self.initial_law.clone()),
            _ => Err(ModelError::Invalid("not an lq_meanfield model".into())),
        }
    }

    pub fn lq_params(&self) -> Option<&LqParams<S>> {
        match &self.builtin {
            Some(Builtin::LqMeanfield(p)) => Some(p),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(kv: &[(&str, f64)]) -> BTreeMap<String, f64> {
        kv.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn ou_drift_formula() {
        let m =
            builtin_model::<f64>("ou_chaos", &params(&[("kappa", 1.0), ("sigma0", 1.0)])).unwrap();
        let view = MeasureView::new(vec![0.0], 0.0);
        assert_eq!(m.drift_vec(0.0, &[2.0], &view, &[0.0]), vec![-2.0]);
    }

    #[test]
    fn bang_action_set_echo() {
        let m = builtin_model::<f64>("bang_relaxed", &params(&[("eps", 0.1)])).unwrap();
        assert_eq!(m.action_set.atoms().unwrap(), &[vec![-1.0], vec![1.0]]);
        assert_eq!(m.builtin, Some(Builtin::BangRelaxed { eps: 0.1 }));
    }

    #[test]
    fn rejects_bad_names_and_params() {
        assert!(matches!(
            builtin_model::<f64>("heston", &BTreeMap::new()),
            Err(ModelError::UnknownModel(_))
        ));
        assert!(matches!(
            builtin_model::<f64>("lq_meanfield", &params(&[("r", 0.0)])),
            Err(ModelError::InvalidParam { .. })
        ));
        assert!(matches!(
            builtin_model::<f64>("lq_meanfield", &params(&[("rho", 1.0)])),
            Err(ModelError::InvalidParam { .. })
        ));
    }

    #[test]
    fn coefficients_are_pure() {
        let m = builtin_model::<f64>("lq_meanfield", &BTreeMap::new()).unwrap();
        let view = MeasureView::new(vec![0.3], 0.7);
        let b0 = m.drift_vec(0.2, &[1.1], &view, &[0.4]);
        let f0 = m.running_reward(0.2, &[1.1], &view, &[0.4]);
        for _ in 0..1000 {
            assert_eq!(m.drift_vec(0.2, &[1.1], &view, &[0.4]), b0);
            assert_eq!(
                m.running_reward(0.2, &[1.1], &view, &[0.4]).to_bits(),
                f0.to_bits()
            );
        }
    }
}
