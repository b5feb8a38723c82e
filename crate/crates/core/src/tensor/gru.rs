use super::array::Tensor;
use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::real::Real;
use super::TensorError;

/// Parameter ids of one gated recurrent unit (gate order r, z, n).
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut impl FnMut(&[usize], usize, usize) -> Tensor<T>,
    ) -> Result<Self, TensorError> {
        Ok(GruCell {
            w_ih: store.add(format!("{prefix}.w_ih"), init(&[input, 3 * hidden], input, hidden))?,
            w_hh: store.add(format!("{prefix}.w_hh"), init(&[hidden, 3 * hidden], hidden, hidden))?,
            b_ih: store.add(format!("{prefix}.b_ih"), Tensor::zeros(&[3 * hidden]))?,
            b_hh: store.add(format!("{prefix}.b_hh"), Tensor::zeros(&[3 * hidden]))?,
            hidden,
        })
    }

    pub fn lookup<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self, TensorError> {
        let get = |s: &str| store.id(&format!("{prefix}.{s}")).ok_or_else(|| TensorError::MissingParam(format!("{prefix}.{s}")));
        let b_hh = get("b_hh")?;
        Ok(GruCell { w_ih: get("w_ih")?, w_hh: get("w_hh")?, b_ih: get("b_ih")?, b_hh, hidden: store.value(b_hh).numel() / 3 })
    }

    /// `h' = (1 − z) ⊙ n + z ⊙ h` for a `[1, input]` row and `[1, hidden]` state.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (w_ih, w_hh, b_ih, b_hh) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.b_ih), g.param(self.b_hh));
        let gi = g.matmul(x, w_ih);
        let gi = g.add_row(gi, b_ih);
        let gh = g.matmul(h, w_hh);
        let gh = g.add_row(gh, b_hh);
        let gate = |g: &mut Graph<'_, T>, k: usize| {
            let a = g.slice_cols(gi, k * hd, hd);
            let b = g.slice_cols(gh, k * hd, hd);
            (a, b)
        };
        let (ir, hr) = gate(g, 0);
        let (iz, hz) = gate(g, 1);
        let (inn, hn) = gate(g, 2);
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(inn, rn);
        let n = g.tanh(n);
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}
