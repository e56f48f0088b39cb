//! Training schemes: the full three-stage method and its ablations.

use crate::loss::Stage;
use crate::model::{Arch, Net};
use crate::registry::{Named, Registry};

pub trait TrainingScheme: Named + Send + Sync {
    /// Architecture adjustments the scheme requires.
    fn adapt_arch(&self, arch: &Arch) -> Arch {
        arch.clone()
    }

    fn stages(&self) -> &'static [Stage] {
        &Stage::ALL
    }

    /// The encoder paired with the generator in Stage I.
    fn stage1_encoder(&self) -> Net {
        Net::Vis
    }
}

/// Visual teacher, distillation, then fine-tuning.
pub struct Full;

impl Named for Full {
    fn name(&self) -> &'static str {
        "full"
    }
}

impl TrainingScheme for Full {}

/// No visual teacher: the cognitive encoder trains directly with the
/// generator and discriminator in Stage I; Stage II is skipped.
pub struct VaeGan;

impl Named for VaeGan {
    fn name(&self) -> &'static str {
        "vae-gan"
    }
}

impl TrainingScheme for VaeGan {
    fn stages(&self) -> &'static [Stage] {
        &[Stage::I, Stage::III]
    }

    fn stage1_encoder(&self) -> Net {
        Net::Cog
    }
}

/// Deterministic encoders: the sample is `μ` and the prior term is dropped.
pub struct CnnEncoder;

impl Named for CnnEncoder {
    fn name(&self) -> &'static str {
        "cnn-encoder"
    }
}

impl TrainingScheme for CnnEncoder {
    fn adapt_arch(&self, arch: &Arch) -> Arch {
        Arch { deterministic: true, ..arch.clone() }
    }
}

pub fn schemes() -> Registry<dyn TrainingScheme> {
    let mut r: Registry<dyn TrainingScheme> = Registry::new("training scheme");
    r.register(Box::new(Full)).register(Box::new(VaeGan)).register(Box::new(CnnEncoder));
    r
}
