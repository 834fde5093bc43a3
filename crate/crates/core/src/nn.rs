//! Small layer building blocks over [`ParamStore`].

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{Bound, Init, ParamId, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut R) -> Result<Self> {
        Self::with_init(store, name, din, dout, Init::Xavier, rng)
    }

    pub fn with_init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.init(&format!("{name}.w"), &[din, dout], init, rng)?;
        let b = store.init(&format!("{name}.b"), &[dout], Init::Zeros, rng)?;
        Ok(Self { w, b, din, dout })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), p.var(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let gain = store.init(&format!("{name}.gain"), &[width], Init::Ones, rng)?;
        let bias = store.init(&format!("{name}.bias"), &[width], Init::Zeros, rng)?;
        Ok(Self { gain, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Two linear maps with a GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.0"), din, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.1"), hidden, dout, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, p, x)?;
        let h = g.gelu(h);
        self.outer.forward(g, p, h)
    }
}

/// `LayerNorm(x + f(x))` style residual wrap.
pub fn residual_norm<T: Real>(g: &mut Graph<T>, p: &Bound, ln: &LayerNorm, x: Var, update: Var) -> Result<Var> {
    let y = g.add(x, update)?;
    ln.forward(g, p, y)
}
