//! Structural hyperparameters, ablation switches and the ablation variants.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Answer head selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecoderMode {
    /// Pick one of `num_choices` candidates, each fused into the query.
    MultiChoice { num_choices: usize },
    /// Classify into a global answer set.
    OpenEnded { answer_set_size: usize },
}

/// Every structural hyperparameter of the hierarchy plus the ablation
/// switches. Field names follow the usual notation: `clips` is K,
/// `clip_len` is L, `gamma` the sparse sampling ratio, `regions` N,
/// `max_tokens` M, `hidden` d and `graph_layers` H.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub clips: usize,
    pub clip_len: usize,
    pub gamma: f64,
    pub regions: usize,
    pub max_tokens: usize,
    pub hidden: usize,
    pub graph_layers: usize,

    pub use_go: bool,
    pub use_gf: bool,
    pub use_gc: bool,
    pub cond_o: bool,
    pub cond_f: bool,
    pub cond_c: bool,
    /// Replace token-wise conditioning by concatenating the global query.
    pub global_fq_condition: bool,
    pub sumpool_o: bool,
    pub sumpool_f: bool,
    pub sumpool_c: bool,
    pub use_fa: bool,
    pub use_fm: bool,

    pub decoder: DecoderMode,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            clips: 4,
            clip_len: 16,
            gamma: 0.25,
            regions: 5,
            max_tokens: 12,
            hidden: 64,
            graph_layers: 2,
            use_go: true,
            use_gf: true,
            use_gc: true,
            cond_o: true,
            cond_f: true,
            cond_c: true,
            global_fq_condition: false,
            sumpool_o: false,
            sumpool_f: false,
            sumpool_c: false,
            use_fa: true,
            use_fm: true,
            decoder: DecoderMode::MultiChoice { num_choices: 5 },
        }
    }
}

impl HierarchyConfig {
    /// Sparse frames per clip, `γ·L`.
    pub fn frames_per_clip(&self) -> usize {
        libm::round(self.gamma * self.clip_len as f64) as usize
    }

    /// Total sparse frame count `T = γ·L·K`.
    pub fn frames(&self) -> usize {
        self.frames_per_clip() * self.clips
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips < 1 || self.regions < 1 || self.graph_layers < 1 || self.max_tokens < 1 {
            return Err(config_err!("K, N, H and M must all be at least 1"));
        }
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return Err(config_err!("hidden width d={} must be even and positive", self.hidden));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(config_err!("gamma={} must lie in (0,1)", self.gamma));
        }
        let per_clip = self.gamma * self.clip_len as f64;
        if per_clip < 1.0 - 1e-9 || libm::fabs(per_clip - libm::round(per_clip)) > 1e-9 {
            return Err(config_err!(
                "gamma*L = {per_clip} must be a positive integer (T = gamma*L*K)"
            ));
        }
        if !self.use_gc {
            return Err(config_err!(
                "the clip level always produces the video vector; use sumpool_c to substitute it"
            ));
        }
        if self.sumpool_o && !self.use_go {
            return Err(config_err!("sumpool_o requires use_go"));
        }
        if self.sumpool_f && !self.use_gf {
            return Err(config_err!("sumpool_f requires use_gf"));
        }
        match self.decoder {
            DecoderMode::MultiChoice { num_choices } if num_choices < 2 => {
                Err(config_err!("multi-choice decoding needs at least 2 candidates"))
            }
            DecoderMode::OpenEnded { answer_set_size } if answer_set_size < 1 => {
                Err(config_err!("open-ended answer set is empty"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_multi_choice(&self) -> bool {
        matches!(self.decoder, DecoderMode::MultiChoice { .. })
    }
}

/// Widths of the raw inputs feeding the projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    /// Raw motion feature width `d_m`.
    pub motion: usize,
    /// Raw frame appearance width `d_a`.
    pub appearance: usize,
    /// Raw region appearance width `d_r`.
    pub region: usize,
    /// Token embedding width.
    pub embed: usize,
    /// Token vocabulary size.
    pub vocab: usize,
}

/// Rows of the ablation table: the full model and its twelve ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    Full,
    NoObjectLevel,
    NoFrameLevel,
    NoObjectFrameLevels,
    SumpoolClip,
    SumpoolClipFrame,
    SumpoolAll,
    NoCondClip,
    NoCondClipFrame,
    NoCondAll,
    GlobalQueryCondition,
    NoMotionContext,
    NoContext,
}

impl AblationVariant {
    /// The twelve ablations, in table order (excludes [`AblationVariant::Full`]).
    pub const ABLATIONS: [AblationVariant; 12] = [
        Self::NoObjectLevel,
        Self::NoFrameLevel,
        Self::NoObjectFrameLevels,
        Self::SumpoolClip,
        Self::SumpoolClipFrame,
        Self::SumpoolAll,
        Self::NoCondClip,
        Self::NoCondClipFrame,
        Self::NoCondAll,
        Self::GlobalQueryCondition,
        Self::NoMotionContext,
        Self::NoContext,
    ];

    /// The full model followed by every ablation.
    pub fn table_rows() -> Vec<AblationVariant> {
        let mut rows = alloc::vec![Self::Full];
        rows.extend_from_slice(&Self::ABLATIONS);
        rows
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "HQGA",
            Self::NoObjectLevel => "w/o G_O",
            Self::NoFrameLevel => "w/o G_F",
            Self::NoObjectFrameLevels => "w/o G_O & G_F",
            Self::SumpoolClip => "w/o G_C(s)",
            Self::SumpoolClipFrame => "w/o G_C & G_F(ss)",
            Self::SumpoolAll => "w/o G_C & G_F & G_O(sss)",
            Self::NoCondClip => "w/o Q_C",
            Self::NoCondClipFrame => "w/o Q_C & Q_F",
            Self::NoCondAll => "w/o Q_C & Q_F & Q_O",
            Self::GlobalQueryCondition => "w/ f_Q",
            Self::NoMotionContext => "w/o F_m",
            Self::NoContext => "w/o F_a & F_m",
        }
    }

    /// Applies this variant's switches on top of `base`. Switches the
    /// variant does not mention are reset to the full-model setting.
    pub fn apply(self, base: &HierarchyConfig) -> HierarchyConfig {
        let mut c = base.clone();
        c.use_go = true;
        c.use_gf = true;
        c.use_gc = true;
        c.cond_o = true;
        c.cond_f = true;
        c.cond_c = true;
        c.global_fq_condition = false;
        c.sumpool_o = false;
        c.sumpool_f = false;
        c.sumpool_c = false;
        c.use_fa = true;
        c.use_fm = true;
        match self {
            Self::Full => {}
            Self::NoObjectLevel => c.use_go = false,
            Self::NoFrameLevel => c.use_gf = false,
            Self::NoObjectFrameLevels => {
                c.use_go = false;
                c.use_gf = false;
            }
            Self::SumpoolClip => c.sumpool_c = true,
            Self::SumpoolClipFrame => {
                c.sumpool_c = true;
                c.sumpool_f = true;
            }
            Self::SumpoolAll => {
                c.sumpool_c = true;
                c.sumpool_f = true;
                c.sumpool_o = true;
            }
            Self::NoCondClip => c.cond_c = false,
            Self::NoCondClipFrame => {
                c.cond_c = false;
                c.cond_f = false;
            }
            Self::NoCondAll => {
                c.cond_c = false;
                c.cond_f = false;
                c.cond_o = false;
            }
            Self::GlobalQueryCondition => c.global_fq_condition = true,
            Self::NoMotionContext => c.use_fm = false,
            Self::NoContext => {
                c.use_fm = false;
                c.use_fa = false;
            }
        }
        c
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::table_rows().into_iter().find(|v| v.label() == label)
    }
}

impl core::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.label())
    }
}

/// Human-readable summary used by the CLI when echoing a resolved config.
pub fn describe(config: &HierarchyConfig) -> String {
    alloc::format!(
        "K={} L={} gamma={} T={} N={} M={} d={} H={}",
        config.clips,
        config.clip_len,
        config.gamma,
        config.frames(),
        config.regions,
        config.max_tokens,
        config.hidden,
        config.graph_layers
    )
}
