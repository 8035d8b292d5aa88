// Parameter layout and forward passes for attention stacks shared by the
// unimodal encoder and the crossmodal layer.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::config::{BlockConfig, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Nonlinearity, Tape, Tensor, Var};

pub(crate) struct Init<'a> {
    pub params: &'a mut BTreeMap<String, Tensor>,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], -bound, bound, self.rng);
        self.params.insert(format!("{prefix}.weight"), w);
        self.params
            .insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub fn norm(&mut self, prefix: &str, width: usize) {
        self.params
            .insert(format!("{prefix}.gain"), Tensor::full(&[width], 1.0));
        self.params
            .insert(format!("{prefix}.bias"), Tensor::zeros(&[width]));
    }

    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, self.rng);
        self.params.insert(name.to_string(), t);
    }

    fn attention(
        &mut self,
        prefix: &str,
        query: usize,
        context: usize,
        heads: usize,
        head_dim: usize,
    ) {
        let inner = heads * head_dim;
        self.linear(&format!("{prefix}.q"), query, inner);
        self.linear(&format!("{prefix}.k"), context, inner);
        self.linear(&format!("{prefix}.v"), context, inner);
        self.linear(&format!("{prefix}.out"), inner, query);
    }

    /// Cross-attention (every layer, or the first only) + latent
    /// self-attention + feed-forward.
    pub fn stack(
        &mut self,
        prefix: &str,
        query: usize,
        context: usize,
        cfg: &BlockConfig,
        ff_mult: usize,
        cross_every_layer: bool,
    ) {
        for l in 0..cfg.depth {
            let p = format!("{prefix}.layer{l}");
            if l == 0 || cross_every_layer {
                self.norm(&format!("{p}.cross.norm_q"), query);
                self.norm(&format!("{p}.cross.norm_kv"), context);
                self.attention(
                    &format!("{p}.cross.attn"),
                    query,
                    context,
                    cfg.cross_heads,
                    cfg.cross_head_dim,
                );
            }
            self.norm(&format!("{p}.self.norm"), query);
            self.attention(
                &format!("{p}.self.attn"),
                query,
                query,
                cfg.latent_heads,
                cfg.latent_head_dim,
            );
            self.norm(&format!("{p}.ff.norm"), query);
            self.linear(&format!("{p}.ff.in"), query, query * ff_mult);
            self.linear(&format!("{p}.ff.out"), query * ff_mult, query);
        }
    }
}

/// Binds named model parameters onto a tape while building a forward pass.
pub(crate) struct Ctx<'a> {
    pub params: &'a BTreeMap<String, Tensor>,
    pub tape: &'a mut Tape,
}

impl Ctx<'_> {
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter `{name}`")))?;
        Ok(self.tape.param(name, t))
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// `[n, L, h·d] -> [n, h, L, d]`
    fn split_heads(&mut self, x: Var, heads: usize, head_dim: usize) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let r = self.tape.reshape(x, &[s[0], s[1], heads, head_dim])?;
        self.tape.swap_axes(r, 1, 2)
    }

    /// Multi-head scaled dot-product attention. Returns the projected output
    /// `[n, Lq, d_q]` and the attention weights `[n, h, Lq, Lk]`.
    pub fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        prefix: &str,
        heads: usize,
        head_dim: usize,
    ) -> Result<(Var, Var)> {
        let q = self.linear(q_in, &format!("{prefix}.q"))?;
        let k = self.linear(kv_in, &format!("{prefix}.k"))?;
        let v = self.linear(kv_in, &format!("{prefix}.v"))?;
        let q = self.split_heads(q, heads, head_dim)?;
        let k = self.split_heads(k, heads, head_dim)?;
        let v = self.split_heads(v, heads, head_dim)?;
        let kt = self.tape.transpose(k)?;
        let scores = self.tape.matmul(q, kt)?;
        let scores = self.tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
        let probs = self.tape.softmax(scores, 3)?;
        let ctx = self.tape.matmul(probs, v)?;
        let ctx = self.tape.swap_axes(ctx, 1, 2)?;
        let s = self.tape.shape(ctx).to_vec();
        let ctx = self.tape.reshape(ctx, &[s[0], s[1], heads * head_dim])?;
        let out = self.linear(ctx, &format!("{prefix}.out"))?;
        Ok((out, probs))
    }

    fn residual(&mut self, x: Var, delta: Var) -> Result<Var> {
        self.tape.add(x, delta)
    }

    /// Runs an attention stack with `x` as the query stream and `context` as
    /// keys/values. Returns the final stream and the cross-attention weights
    /// of each layer that cross-attends.
    pub fn stack(
        &mut self,
        mut x: Var,
        context: Var,
        prefix: &str,
        cfg: &BlockConfig,
        nonlinearity: Nonlinearity,
        cross_every_layer: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let mut cross = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("{prefix}.layer{l}");
            if l == 0 || cross_every_layer {
                let q = self.norm(x, &format!("{p}.cross.norm_q"))?;
                let c = self.norm(context, &format!("{p}.cross.norm_kv"))?;
                let (a, probs) = self.attention(
                    q,
                    c,
                    &format!("{p}.cross.attn"),
                    cfg.cross_heads,
                    cfg.cross_head_dim,
                )?;
                cross.push(probs);
                x = self.residual(x, a)?;
            }

            let h = self.norm(x, &format!("{p}.self.norm"))?;
            let (a, _) = self.attention(
                h,
                h,
                &format!("{p}.self.attn"),
                cfg.latent_heads,
                cfg.latent_head_dim,
            )?;
            x = self.residual(x, a)?;

            let h = self.norm(x, &format!("{p}.ff.norm"))?;
            let h = self.linear(h, &format!("{p}.ff.in"))?;
            let h = self.tape.activation(h, nonlinearity);
            let h = self.linear(h, &format!("{p}.ff.out"))?;
            x = self.residual(x, h)?;
        }
        Ok((x, cross))
    }

    /// Last row along the sequence axis: `[n, L, d] -> [n, d]`.
    pub fn last_row(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let r = self.tape.slice(x, 1, s[1] - 1, 1)?;
        self.tape.reshape(r, &[s[0], s[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_head_attention_matches_hand_formula() {
        // 1 latent query, 2 context tokens, width 2, identity projections
        let mut params = BTreeMap::new();
        let eye = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        for p in ["q", "k", "v", "out"] {
            params.insert(format!("a.{p}.weight"), eye.clone());
            params.insert(format!("a.{p}.bias"), Tensor::zeros(&[2]));
        }
        let mut tape = Tape::new();
        let q_in = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.5]).unwrap());
        let kv = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.2, 1.0, -0.4, 2.0]).unwrap());
        let mut ctx = Ctx {
            params: &params,
            tape: &mut tape,
        };
        let (out, probs) = ctx.attention(q_in, kv, "a", 1, 2).unwrap();

        let s1 = (1.0 * 0.2 + 0.5 * 1.0) / 2f64.sqrt();
        let s2 = (1.0 * -0.4 + 0.5 * 2.0) / 2f64.sqrt();
        let (e1, e2) = (s1.exp(), s2.exp());
        let (w1, w2) = (e1 / (e1 + e2), e2 / (e1 + e2));
        let expect = [w1 * 0.2 + w2 * -0.4, w1 * 1.0 + w2 * 2.0];
        let got = tape.value(out).data();
        assert!((got[0] - expect[0]).abs() < 1e-14);
        assert!((got[1] - expect[1]).abs() < 1e-14);
        assert!((tape.value(probs).data()[0] - w1).abs() < 1e-14);
    }

    #[test]
    fn missing_parameter_is_incompatible() {
        let params = BTreeMap::new();
        let mut tape = Tape::new();
        let mut ctx = Ctx {
            params: &params,
            tape: &mut tape,
        };
        assert!(matches!(ctx.param("nope"), Err(Error::Incompatible(_))));
    }

    #[test]
    fn init_is_seeded() {
        let build = || {
            let mut params = BTreeMap::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut init = Init {
                params: &mut params,
                rng: &mut rng,
            };
            init.linear("l", 3, 4);
            params
        };
        assert_eq!(build(), build());
    }
}
