use std::fmt;

use crate::error::{Error, Result};
use crate::ndcore::{Bound, Real, Tape, Var};

use super::network::{affine, FusionConfig, Init, ParamSpec};

/// Merges the per-stream feature vectors into one `d`-vector.
pub trait FusionBlock<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of backbone streams the block consumes (1 or 2).
    fn streams(&self) -> usize;

    fn param_specs(&self, d: usize, cfg: &FusionConfig) -> Result<Vec<ParamSpec>>;

    fn fuse(&self, tape: &mut Tape<T>, params: &Bound, f1: Var, f2: Option<Var>, cfg: &FusionConfig) -> Result<Var>;
}

type Factory<T> = fn() -> Box<dyn FusionBlock<T>>;

/// Name → fusion block constructor.
pub struct FusionRegistry<T> {
    entries: Vec<(&'static str, Factory<T>)>,
}

impl<T: Real> fmt::Debug for FusionRegistry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl<T: Real> FusionRegistry<T> {
    pub fn empty() -> Self {
        FusionRegistry { entries: Vec::new() }
    }

    /// `cross`, `simple` and `affine`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(CrossAttention::NAME, || Box::new(CrossAttention));
        r.register(SimpleAttention::NAME, || Box::new(SimpleAttention));
        r.register(AffineBypass::NAME, || Box::new(AffineBypass));
        r
    }

    /// Later registrations under an existing name replace it.
    pub fn register(&mut self, name: &'static str, factory: Factory<T>) {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, factory));
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn FusionBlock<T>>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "fusion",
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}

/// Token-level bidirectional cross-attention.
///
/// Each `d`-vector is viewed as `n_tokens × token_dim`. Stream 1 queries
/// stream 2 (`softmax(Q1·K2ᵀ/√token_dim)·V2`) and vice versa; the two
/// attended grids are flattened, concatenated and projected `2d → d`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossAttention;

/// Intermediate results of [`CrossAttention::attend`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// Stream 1 attending to stream 2, `n_tokens × token_dim`.
    pub a12: Var,
    pub a21: Var,
    /// Row-stochastic attention weights, `n_tokens × n_tokens`.
    pub weights12: Var,
    pub weights21: Var,
}

impl CrossAttention {
    pub const NAME: &'static str = "cross";

    pub fn attend<T: Real>(
        tape: &mut Tape<T>,
        params: &Bound,
        f1: Var,
        f2: Var,
        cfg: &FusionConfig,
    ) -> Result<Attended> {
        let d = tape.shape(f1).iter().product::<usize>();
        let tok = cfg.token_dim(d)?;
        let t1 = tape.reshape(f1, &[cfg.n_tokens, tok])?;
        let t2 = tape.reshape(f2, &[cfg.n_tokens, tok])?;
        let scale = T::one() / T::lit(tok as f64).sqrt();
        let one_way = |tape: &mut Tape<T>, from: Var, to: Var, q: &str, k: &str, v: &str| -> Result<(Var, Var)> {
            let query = tape.matmul(from, params.get(q)?)?;
            let key = tape.matmul(to, params.get(k)?)?;
            let value = tape.matmul(to, params.get(v)?)?;
            let kt = tape.transpose(key)?;
            let scores = tape.matmul(query, kt)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax(scores)?;
            Ok((tape.matmul(weights, value)?, weights))
        };
        let (a12, weights12) = one_way(tape, t1, t2, "fuse.wq1", "fuse.wk2", "fuse.wv2")?;
        let (a21, weights21) = one_way(tape, t2, t1, "fuse.wq2", "fuse.wk1", "fuse.wv1")?;
        Ok(Attended {
            a12,
            a21,
            weights12,
            weights21,
        })
    }
}

impl<T: Real> FusionBlock<T> for CrossAttention {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn streams(&self) -> usize {
        2
    }

    fn param_specs(&self, d: usize, cfg: &FusionConfig) -> Result<Vec<ParamSpec>> {
        let tok = cfg.token_dim(d)?;
        let mut specs: Vec<ParamSpec> = ["wq1", "wk1", "wv1", "wq2", "wk2", "wv2"]
            .iter()
            .map(|n| ParamSpec::new(format!("fuse.{n}"), &[tok, tok], Init::LecunUniform { fan_in: tok }))
            .collect();
        specs.push(ParamSpec::new(
            "fuse.proj.w",
            &[2 * d, d],
            Init::LecunUniform { fan_in: 2 * d },
        ));
        specs.push(ParamSpec::new("fuse.proj.b", &[d], Init::Zeros));
        Ok(specs)
    }

    fn fuse(&self, tape: &mut Tape<T>, params: &Bound, f1: Var, f2: Option<Var>, cfg: &FusionConfig) -> Result<Var> {
        let f2 = f2.ok_or_else(|| Error::Config("cross attention needs two streams".into()))?;
        let att = Self::attend(tape, params, f1, f2, cfg)?;
        let a12 = tape.flatten(att.a12)?;
        let a21 = tape.flatten(att.a21)?;
        let cat = tape.concat_last(&[a12, a21])?;
        affine(tape, cat, params.get("fuse.proj.w")?, params.get("fuse.proj.b")?)
    }
}

/// Ablation baseline without learned projections: a scalar sigmoid gate
/// `g = σ(f1·f2/√d)` mixes each vector with the other residually
/// (`f1 + g·f2`, `f2 + g·f1`) and the two halves are averaged.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimpleAttention;

impl SimpleAttention {
    pub const NAME: &'static str = "simple";
}

impl<T: Real> FusionBlock<T> for SimpleAttention {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn streams(&self) -> usize {
        2
    }

    fn param_specs(&self, _d: usize, _cfg: &FusionConfig) -> Result<Vec<ParamSpec>> {
        Ok(Vec::new())
    }

    fn fuse(&self, tape: &mut Tape<T>, _params: &Bound, f1: Var, f2: Option<Var>, _cfg: &FusionConfig) -> Result<Var> {
        let f2 = f2.ok_or_else(|| Error::Config("simple attention needs two streams".into()))?;
        let d = tape.value(f1).len();
        let inv_sqrt_d = T::one() / T::lit(d as f64).sqrt();
        let gate = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
            let s = tape.dot(a, b)?;
            let s = tape.scale(s, inv_sqrt_d)?;
            tape.sigmoid(s)
        };
        let g12 = gate(tape, f1, f2)?;
        let g21 = gate(tape, f2, f1)?;
        let m12 = tape.scale_by(f2, g12)?;
        let h1 = tape.add(f1, m12)?;
        let m21 = tape.scale_by(f1, g21)?;
        let h2 = tape.add(f2, m21)?;
        let sum = tape.add(h1, h2)?;
        tape.scale(sum, T::lit(0.5))
    }
}

/// Single-stream stand-in for fusion: one affine `d → d` map.
#[derive(Debug, Clone, Copy, Default)]
pub struct AffineBypass;

impl AffineBypass {
    pub const NAME: &'static str = "affine";
}

impl<T: Real> FusionBlock<T> for AffineBypass {
    fn name(&self) -> &'static str {
        Self::NAME
    }

    fn streams(&self) -> usize {
        1
    }

    fn param_specs(&self, d: usize, _cfg: &FusionConfig) -> Result<Vec<ParamSpec>> {
        Ok(vec![
            ParamSpec::new("fuse.proj.w", &[d, d], Init::LecunUniform { fan_in: d }),
            ParamSpec::new("fuse.proj.b", &[d], Init::Zeros),
        ])
    }

    fn fuse(&self, tape: &mut Tape<T>, params: &Bound, f1: Var, _f2: Option<Var>, _cfg: &FusionConfig) -> Result<Var> {
        affine(tape, f1, params.get("fuse.proj.w")?, params.get("fuse.proj.b")?)
    }
}
