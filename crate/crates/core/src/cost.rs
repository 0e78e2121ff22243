//! Analytic FLOP counts for one forward pass.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs, softmax costs 5 FLOPs per
//! score (max, subtract, exp, sum, divide), an elementwise op costs 1.
//! Attention of `r` queries against `c` keys at head width `d` therefore
//! costs `r * c * (4d + 5)`: `2rcd` for the scores, `5rc` for the softmax
//! and `2rcd` for the weighted sum.
//!
//! Per layer, with `H` heads, model width `C`, FFN width `F`:
//!
//! * projections: `8 N C H d` (Q, K, V in, one out),
//! * FFN: `6 N C F` for the three matrices plus `6 N F` for SiLU and the
//!   gate product,
//! * full attention: `H N^2 (4d + 5)`,
//! * ball: `H N m (4d + 5)`,
//! * compression: `H N (N / l) (4d + 5)`, or `H (N / l)^2 (4d + 5)` with
//!   group compression,
//! * selection: `H N (k l) (4d + 5)`,
//! * scoring: `2d` per score plus averaging and a linear-time top-k pass,
//! * phi: `N d` per pooled stream for the mean; the MLP costs
//!   `(N / l)(4 l d^2 + 4 d^2 + 10 d)` per stream,
//! * gates: `2 N d` per active branch per head, plus 4 per sigmoid.
//!
//! Sparse variants use the padded length `ceil(N / m) m`.

use std::fmt::Write as _;

use crate::config::{BsaConfig, PhiKind, Variant};
use crate::error::Result;

/// Attention cost of `rows x cols` scores at head width `d`.
fn attn_cost(rows: f64, cols: f64, d: f64) -> f64 {
    rows * cols * (4.0 * d + 5.0)
}

/// FLOPs per layer by component; `depth` scales everything to the model.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostReport {
    pub n: usize,
    pub depth: usize,
    pub flops_dense: f64,
    pub flops_ball: f64,
    pub flops_cmp: f64,
    pub flops_slc: f64,
    pub flops_scoring: f64,
    pub flops_phi: f64,
    pub flops_gate: f64,
    pub flops_proj: f64,
    pub flops_mlp: f64,
}

impl CostReport {
    /// Attention-side work of one layer (everything except projections and
    /// the FFN).
    pub fn layer_attention(&self) -> f64 {
        self.flops_dense
            + self.flops_ball
            + self.flops_cmp
            + self.flops_slc
            + self.flops_scoring
            + self.flops_phi
            + self.flops_gate
    }

    pub fn layer_total(&self) -> f64 {
        self.layer_attention() + self.flops_proj + self.flops_mlp
    }

    pub fn total(&self) -> f64 {
        self.layer_total() * self.depth as f64
    }

    fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("dense", self.flops_dense),
            ("ball", self.flops_ball),
            ("cmp", self.flops_cmp),
            ("slc", self.flops_slc),
            ("scoring", self.flops_scoring),
            ("phi", self.flops_phi),
            ("gate", self.flops_gate),
            ("proj", self.flops_proj),
            ("mlp", self.flops_mlp),
        ]
    }

    /// `key=value` lines; per-layer components, then aggregates.
    pub fn to_key_values(&self, variant: &str) -> String {
        let mut s = format!("variant={variant}\nn={}\ndepth={}\n", self.n, self.depth);
        for (k, v) in self.fields() {
            let _ = writeln!(s, "flops_{k}={v:.0}");
        }
        let _ = writeln!(s, "layer_total={:.0}", self.layer_total());
        let _ = writeln!(s, "total={:.0}", self.total());
        s
    }

    pub const CSV_HEADER: &'static str =
        "variant,n,depth,dense,ball,cmp,slc,scoring,phi,gate,proj,mlp,layer_total,total";

    pub fn to_csv_row(&self, variant: &str) -> String {
        let mut s = format!("{variant},{},{}", self.n, self.depth);
        for (_, v) in self.fields() {
            let _ = write!(s, ",{v:.0}");
        }
        let _ = write!(s, ",{:.0},{:.0}", self.layer_total(), self.total());
        s
    }
}

fn dense_part(n: f64, cfg: &BsaConfig, depth: usize) -> CostReport {
    let c = cfg.model_dim as f64;
    let f = cfg.ffn_dim as f64;
    let inner = cfg.inner_dim() as f64;
    CostReport {
        n: n as usize,
        depth,
        flops_proj: 8.0 * n * c * inner,
        flops_mlp: 6.0 * n * c * f + 6.0 * n * f,
        ..Default::default()
    }
}

/// Dense multi-head attention at length `n`.
pub fn flops_full(n: usize, cfg: &BsaConfig, depth: usize) -> CostReport {
    let nf = n as f64;
    CostReport {
        flops_dense: cfg.heads as f64 * attn_cost(nf, nf, cfg.head_dim as f64),
        ..dense_part(nf, cfg, depth)
    }
}

/// Sparse attention at length `n` for `variant` applied to `cfg`.
pub fn flops_bsa(n: usize, cfg: &BsaConfig, variant: Variant, depth: usize) -> Result<CostReport> {
    let cfg = cfg.clone().with_variant(variant);
    if cfg.full_attention {
        return Ok(flops_full(n, &cfg, depth));
    }
    cfg.validate()?;
    let m = cfg.ball_size;
    let n_pad = n.div_ceil(m) * m;
    cfg.validate_for(n_pad)?;
    Ok(flops_sparse(n_pad, &cfg, depth))
}

fn flops_sparse(n_pad: usize, cfg: &BsaConfig, depth: usize) -> CostReport {
    let n = n_pad as f64;
    let h = cfg.heads as f64;
    let d = cfg.head_dim as f64;
    let l = cfg.block_len as f64;
    let nc = n / l;
    let br = cfg.branches;
    let mut r = CostReport {
        n: n_pad,
        ..dense_part(n, cfg, depth)
    };
    if br.ball {
        r.flops_ball = h * attn_cost(n, cfg.ball_size as f64, d);
    }
    if br.compression {
        r.flops_cmp = h * if cfg.group_compression {
            attn_cost(nc, nc, d)
        } else {
            attn_cost(n, nc, d)
        };
    }
    if br.selection {
        r.flops_slc = h * attn_cost(n, cfg.top_k as f64 * l, d);
        let units = n / cfg.effective_group() as f64;
        let score_rows = if cfg.coarse_scoring() { nc } else { n };
        let average = if cfg.group_selection { score_rows * nc } else { 0.0 };
        r.flops_scoring = h * (score_rows * nc * 2.0 * d + average + units * nc);
    }
    let mut streams = 0.0;
    if br.compression || br.selection {
        streams += 1.0;
    }
    if br.compression {
        streams += 1.0;
    }
    if cfg.needs_coarse_queries() {
        streams += 1.0;
    }
    let per_stream = match cfg.phi {
        PhiKind::Mean => n * d,
        PhiKind::Mlp => nc * (4.0 * l * d * d + 4.0 * d * d + 10.0 * d),
    };
    r.flops_phi = h * streams * per_stream;
    let active = [br.ball, br.compression, br.selection].iter().filter(|&&b| b).count() as f64;
    r.flops_gate = h * (2.0 * active * n * d + active * 4.0);
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BsaConfig {
        BsaConfig::desk_default()
    }

    #[test]
    fn single_token_attention_terms() {
        let c = BsaConfig { heads: 1, ..cfg() };
        let r = flops_full(1, &c, 1);
        let d = c.head_dim as f64;
        assert_eq!(r.flops_dense, 2.0 * d + 5.0 + 2.0 * d);
        assert!(r.flops_proj > r.flops_dense);
    }

    #[test]
    fn doubling_n_quadruples_dense_attention() {
        for n in [64, 1000, 4096] {
            let a = flops_full(n, &cfg(), 1).flops_dense;
            let b = flops_full(2 * n, &cfg(), 1).flops_dense;
            assert_eq!(b, 4.0 * a);
        }
        let ratio = flops_full(4096, &cfg(), 1).total() / flops_full(2048, &cfg(), 1).total();
        assert!((3.6..=4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn table_order_at_4096_depth_18() {
        let t = |v| flops_bsa(4096, &cfg(), v, 18).unwrap().total();
        let gc = t(Variant::BsaGroupCompression);
        let bsa = t(Variant::Bsa);
        let nog = t(Variant::BsaNoGroup);
        let full = t(Variant::Full);
        assert!(gc < bsa && bsa < nog && nog < full, "{gc} {bsa} {nog} {full}");
    }

    #[test]
    fn saturated_sparse_config_does_at_least_dense_work() {
        let n = 256;
        let c = BsaConfig {
            ball_size: n,
            block_len: 1,
            top_k: n,
            group_size: 1,
            ball_masking: false,
            group_selection: false,
            ..cfg()
        };
        let r = flops_bsa(n, &c, Variant::BsaNoGroup, 1).unwrap();
        assert!(r.layer_attention() >= flops_full(n, &c, 1).flops_dense);
    }

    #[test]
    fn group_compression_shrinks_compression_by_block_len() {
        let a = flops_bsa(4096, &cfg(), Variant::Bsa, 1).unwrap().flops_cmp;
        let b = flops_bsa(4096, &cfg(), Variant::BsaGroupCompression, 1)
            .unwrap()
            .flops_cmp;
        assert_eq!(a / b, cfg().block_len as f64);
    }

    #[test]
    fn reports_are_consistent() {
        let r = flops_bsa(3000, &cfg(), Variant::Bsa, 4).unwrap();
        assert_eq!(r.n, 3072);
        let parts: f64 = r.fields().iter().map(|(_, v)| v).sum();
        assert_eq!(r.layer_total(), parts);
        assert_eq!(r.total(), 4.0 * parts);
        let kv = r.to_key_values("bsa");
        assert!(kv.contains("variant=bsa\n") && kv.contains(&format!("total={:.0}", r.total())));
        let row = r.to_csv_row("bsa");
        assert_eq!(row.split(',').count(), CostReport::CSV_HEADER.split(',').count());
        let mut bad = cfg();
        bad.block_len = 3;
        assert!(flops_bsa(4096, &bad, Variant::Bsa, 1).is_err());
    }
}
