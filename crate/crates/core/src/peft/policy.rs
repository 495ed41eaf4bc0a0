use crate::error::Result;
use crate::peft::method::{FpnNormTraining, MethodConfig, MethodName};
use crate::peft::registry::{ParamEntry, ParamRegistry, Site};
use crate::tape::Owner;

/// Sets every entry's trainable flag for method `m`.
///
/// Lateral and classifier layers always train. FPN norms follow
/// [`MethodConfig::fpn_norm_training`]. Adapter-owned entries exist only for
/// the method that inserted them and always train. Backbone entries follow
/// the method's freezing rule.
pub fn apply_tuning_policy(mut registry: ParamRegistry, m: &MethodConfig) -> Result<ParamRegistry> {
    m.validate()?;
    let last_block = registry
        .entries()
        .iter()
        .filter(|e| e.owner == Owner::Backbone)
        .filter_map(|e| match e.site {
            Site::Block { stage, block } => Some((stage, block)),
            _ => None,
        })
        .max();
    let fpn = m.fpn_norm_training();
    for e in registry.iter_mut() {
        e.trainable = trainable(e, m.name, fpn, last_block);
    }
    Ok(registry)
}

fn trainable(
    e: &ParamEntry,
    name: MethodName,
    fpn: FpnNormTraining,
    last_block: Option<(usize, usize)>,
) -> bool {
    match e.site {
        Site::Lateral { .. } | Site::Classifier => return true,
        Site::FpnNorm { .. } => {
            return match fpn {
                FpnNormTraining::None => false,
                FpnNormTraining::BiasOnly => e.role.is_bias(),
                FpnNormTraining::All => true,
            }
        }
        _ => {}
    }
    if e.owner != Owner::Backbone {
        return name.inserts();
    }
    match name {
        MethodName::Full => true,
        MethodName::Bitfit => e.role.is_bias(),
        MethodName::Norm => e.role.is_norm(),
        MethodName::Partial1 => match e.site {
            Site::Block { stage, block } => Some((stage, block)) == last_block,
            _ => false,
        },
        MethodName::Fixed
        | MethodName::Adapter
        | MethodName::Lora
        | MethodName::Adaptformer
        | MethodName::E3va => false,
    }
}
