//! Layer hyperparameters and the named variants compared in benchmarks.

use std::fmt;
use std::str::FromStr;

use crate::error::{BsaError, Result};

/// Block compressor used for coarse keys, values and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhiKind {
    /// Mean over the valid rows of a block.
    Mean,
    /// Flatten the block, one hidden SiLU layer of width `2 * head_dim`.
    Mlp,
}

impl FromStr for PhiKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(PhiKind::Mean),
            "mlp" => Ok(PhiKind::Mlp),
            other => Err(format!("unknown phi `{other}` (expected mean|mlp)")),
        }
    }
}

impl fmt::Display for PhiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhiKind::Mean => "mean",
            PhiKind::Mlp => "mlp",
        })
    }
}

/// Which branches contribute to the fused output. Disabled branches are
/// neither computed nor gated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BranchSet {
    pub ball: bool,
    pub compression: bool,
    pub selection: bool,
}

impl BranchSet {
    pub const ALL: Self = Self {
        ball: true,
        compression: true,
        selection: true,
    };
    pub const BALL_ONLY: Self = Self {
        ball: true,
        compression: false,
        selection: false,
    };
    pub const BALL_SELECTION: Self = Self {
        ball: true,
        compression: false,
        selection: true,
    };

    pub fn any(self) -> bool {
        self.ball || self.compression || self.selection
    }
}

impl Default for BranchSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// The attention variants compared against each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Dense multi-head attention over all valid tokens.
    Full,
    /// Group selection with mean-pooled query coarsening.
    Bsa,
    /// Per-token top-k selection.
    BsaNoGroup,
    /// Group selection plus compression at coarse query resolution (MLP phi).
    BsaGroupCompression,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::Bsa,
        Variant::BsaNoGroup,
        Variant::BsaGroupCompression,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Bsa => "bsa",
            Variant::BsaNoGroup => "bsa-nogroup",
            Variant::BsaGroupCompression => "bsa-gc",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}` (expected full|bsa|bsa-nogroup|bsa-gc)"))
    }
}

/// Hyperparameters of one attention layer (and its feed-forward half).
///
/// `block_len` is simultaneously the compression block size, the
/// compression stride and the selection block size.
#[derive(Debug, Clone, PartialEq)]
pub struct BsaConfig {
    pub ball_size: usize,
    pub block_len: usize,
    pub top_k: usize,
    pub group_size: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    /// SwiGLU hidden width.
    pub ffn_dim: usize,
    pub phi: PhiKind,
    pub group_selection: bool,
    /// Score groups from block-pooled queries instead of averaging
    /// per-token scores. Only consulted when `group_selection` is on.
    pub coarsen_queries: bool,
    pub group_compression: bool,
    /// Exclude blocks inside the query's own ball from selection.
    pub ball_masking: bool,
    pub branches: BranchSet,
    /// Replace the three branches with dense attention.
    pub full_attention: bool,
}

impl Default for BsaConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl BsaConfig {
    /// Sparse parameters of the reference configuration (ball 256, blocks of
    /// 8, top-4, groups of 8) at desk-scale widths.
    pub fn desk_default() -> Self {
        Self {
            ball_size: 256,
            block_len: 8,
            top_k: 4,
            group_size: 8,
            heads: 4,
            model_dim: 64,
            head_dim: 16,
            ffn_dim: 128,
            phi: PhiKind::Mean,
            group_selection: true,
            coarsen_queries: true,
            group_compression: false,
            ball_masking: true,
            branches: BranchSet::ALL,
            full_attention: false,
        }
    }

    /// Applies the flags that define `variant`, keeping sizes.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.full_attention = false;
        match variant {
            Variant::Full => self.full_attention = true,
            Variant::Bsa => {
                self.group_selection = true;
                self.coarsen_queries = true;
                self.group_compression = false;
                self.phi = PhiKind::Mean;
            }
            Variant::BsaNoGroup => {
                self.group_selection = false;
                self.group_compression = false;
                self.phi = PhiKind::Mean;
            }
            Variant::BsaGroupCompression => {
                self.group_selection = true;
                self.coarsen_queries = true;
                self.group_compression = true;
                self.phi = PhiKind::Mlp;
            }
        }
        self
    }

    pub fn variant(&self) -> Option<Variant> {
        if self.full_attention {
            return Some(Variant::Full);
        }
        match (self.group_selection, self.group_compression, self.phi) {
            (true, false, PhiKind::Mean) if self.coarsen_queries => Some(Variant::Bsa),
            (false, false, PhiKind::Mean) => Some(Variant::BsaNoGroup),
            (true, true, PhiKind::Mlp) => Some(Variant::BsaGroupCompression),
            _ => None,
        }
    }

    pub fn inner_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Selection groups are scored from coarse (block-pooled) queries.
    pub fn coarse_scoring(&self) -> bool {
        self.group_selection && (self.coarsen_queries || self.group_compression)
    }

    /// A coarse query stream is computed at all.
    pub fn needs_coarse_queries(&self) -> bool {
        !self.full_attention
            && ((self.branches.selection && self.coarse_scoring())
                || (self.branches.compression && self.group_compression))
    }

    /// Query group size actually used by selection.
    pub fn effective_group(&self) -> usize {
        if self.group_selection {
            self.group_size
        } else {
            1
        }
    }

    pub fn blocks_per_ball(&self) -> usize {
        self.ball_size / self.block_len
    }

    /// Checks that do not depend on the sequence length.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ball_size", self.ball_size),
            ("block_len", self.block_len),
            ("top_k", self.top_k),
            ("group_size", self.group_size),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BsaError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.full_attention {
            return Ok(());
        }
        if !self.branches.any() {
            return Err(BsaError::InvalidConfig("at least one branch must be enabled".into()));
        }
        if self.ball_size % self.block_len != 0 {
            return Err(BsaError::InvalidConfig(format!(
                "ball_size {} is not divisible by block_len {}",
                self.ball_size, self.block_len
            )));
        }
        if self.ball_size % self.group_size != 0 {
            return Err(BsaError::InvalidConfig(format!(
                "ball_size {} is not divisible by group_size {}",
                self.ball_size, self.group_size
            )));
        }
        if self.branches.selection && self.coarse_scoring() && self.group_size % self.block_len != 0 {
            return Err(BsaError::InvalidConfig(format!(
                "coarse group scoring needs group_size {} divisible by block_len {}",
                self.group_size, self.block_len
            )));
        }
        Ok(())
    }

    /// Full validation against a padded sequence length.
    pub fn validate_for(&self, n_padded: usize) -> Result<()> {
        self.validate()?;
        if self.full_attention {
            return Ok(());
        }
        if n_padded % self.ball_size != 0 {
            return Err(BsaError::InvalidConfig(format!(
                "padded length {n_padded} is not a multiple of ball_size {}",
                self.ball_size
            )));
        }
        if self.branches.selection {
            let n_blocks = n_padded / self.block_len;
            let candidates = if self.ball_masking {
                n_blocks - self.blocks_per_ball()
            } else {
                n_blocks
            };
            if self.top_k > candidates {
                return Err(BsaError::InvalidConfig(format!(
                    "top_k {} exceeds the {candidates} candidate blocks at length {n_padded}",
                    self.top_k
                )));
            }
        }
        Ok(())
    }

    /// Full validation for a cloud of `n` points. Unlike
    /// [`validate_for`](Self::validate_for) this knows which blocks are pure
    /// padding, so every top-k failure is caught here rather than during
    /// selection.
    pub fn validate_points(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n == 0 {
            return Err(BsaError::InvalidArgument("point cloud is empty".into()));
        }
        if self.full_attention {
            return Ok(());
        }
        self.validate_for(n.div_ceil(self.ball_size) * self.ball_size)?;
        if self.branches.selection {
            // Padding sits at the end, so the first ball is the fullest and
            // leaves its groups the fewest candidates.
            let valid_blocks = n.div_ceil(self.block_len);
            let own = if self.ball_masking {
                self.blocks_per_ball().min(valid_blocks)
            } else {
                0
            };
            if self.top_k > valid_blocks - own {
                return Err(BsaError::InvalidConfig(format!(
                    "top_k {} exceeds the {} selectable blocks of a {n}-point cloud",
                    self.top_k,
                    valid_blocks - own
                )));
            }
        }
        Ok(())
    }
}
