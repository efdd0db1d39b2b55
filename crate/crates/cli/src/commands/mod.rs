pub mod analysis;
pub mod evaluate;
pub mod prepare;
pub mod train;

use crate::artifacts::Context;
use crate::error::Result;

/// Every stage from ingest to report, in order. Runs `synth` first when the
/// config carries a `[synth]` section.
pub fn pipeline(ctx: &Context) -> Result<()> {
    if ctx.cfg.synth.is_some() {
        prepare::synth(ctx)?;
    }
    let stages: [(&str, fn(&Context) -> Result<()>); 8] = [
        ("ingest", prepare::ingest),
        ("train-pathology", train::train_pathology),
        ("train-clinical", train::train_clinical),
        ("build-ensemble", evaluate::build_ensemble),
        ("evaluate", evaluate::evaluate),
        ("stratify", analysis::stratify),
        ("pool", analysis::pool),
        ("report", analysis::report),
    ];
    for (name, stage) in stages {
        log::info!("stage {name}");
        stage(ctx)?;
    }
    Ok(())
}
