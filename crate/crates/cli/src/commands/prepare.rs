//! `synth`, `ingest` and `tile`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use prognos_core::domain::{Endpoint, SubjectRecord};
use prognos_core::io::{content_hash, encode_embedding, read_cohort, read_embedding, write_cohort};
use prognos_core::synth::{synthesize, truth_tsv, SynthSpec};
use prognos_core::tiling::{extract_patches, manifest_tsv, GrayImage, PatchManifest};
use rayon::prelude::*;

use crate::artifacts::{Context, StageWriter};
use crate::data::{load_raw_cohorts, INGESTED_COHORT, INGEST_STAGE};
use crate::error::{CliError, Result};

/// Writes synthetic cohorts and embeddings into the configured input
/// directories and the planted risks into `synth/truth.tsv`.
pub fn synth(ctx: &Context) -> Result<()> {
    let mut spec: SynthSpec = ctx.cfg.synth.clone().unwrap_or_default();
    spec.seed = ctx.cfg.seed;
    let out = synthesize(&spec).map_err(|e| CliError::Validation(e.to_string()))?;
    let mut w = StageWriter::begin(ctx, "synth")?;
    for cohort in &spec.cohorts {
        let rows: Vec<SubjectRecord> = out.subjects.iter().filter(|s| s.dataset_id == cohort.name).cloned().collect();
        w.write_at(&ctx.paths.cohorts.join(format!("{}.csv", cohort.name)), write_cohort(&rows).as_bytes())?;
    }
    for bag in &out.bags {
        w.write_at(&ctx.paths.embeddings.join(bag.slide_id()), &encode_embedding(bag))?;
    }
    w.write_stamped("truth.tsv", &truth_tsv(&out.truth))?;
    w.note("censoring_hazard", out.censoring_hazard.to_string());
    w.note("achieved_censoring", out.achieved_censoring.to_string());
    w.finish()?;
    Ok(())
}

/// Hash over `(slide id, file hash)` pairs, standing in for every
/// embedding file in the manifest.
pub fn embeddings_digest(ctx: &Context, slides: &[&String]) -> Result<String> {
    let hashes: Vec<String> = slides
        .par_iter()
        .map(|slide| {
            let path = ctx.paths.embeddings.join(slide);
            std::fs::read(&path).map(|b| content_hash(&b)).map_err(|e| CliError::missing(&path, e.to_string()))
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for (s, h) in slides.iter().zip(hashes) {
        let _ = writeln!(text, "{s}\t{h}");
    }
    Ok(content_hash(text.as_bytes()))
}

/// Validates cohorts and embeddings, re-emits the canonical cohort and
/// writes per-dataset summaries.
pub fn ingest(ctx: &Context) -> Result<()> {
    let mut w = StageWriter::begin(ctx, INGEST_STAGE)?;
    let (files, subjects) = load_raw_cohorts(&ctx.paths.cohorts)?;
    for f in &files {
        w.input(f)?;
    }
    let canonical = write_cohort(&subjects);
    let reread = read_cohort(&canonical)?;
    if reread != subjects || write_cohort(&reread) != canonical {
        return Err(CliError::Validation("canonical cohort does not round-trip".into()));
    }
    let mut slides: Vec<&String> = subjects.iter().flat_map(|s| &s.embedding_refs).collect();
    slides.sort();
    slides.dedup();
    let problems: Vec<(String, String)> = slides
        .par_iter()
        .filter_map(|slide| read_embedding(&ctx.paths.embeddings, slide).err().map(|e| (slide.to_string(), e.to_string())))
        .collect();
    if let Some((slide, msg)) = problems.first() {
        return Err(CliError::missing(ctx.paths.embeddings.join(slide), format!("{} unreadable embeddings; first: {msg}", problems.len())));
    }
    w.input_hash("embeddings".into(), embeddings_digest(ctx, &slides)?);
    w.write(INGESTED_COHORT, canonical.as_bytes())?;
    w.write_stamped("summary.tsv", &summary_tsv(&subjects))?;
    w.write_stamped("endpoints.tsv", &endpoints_tsv(&subjects))?;
    let mut excl = String::from("subject_id\tdataset_id\treason\n");
    for s in subjects.iter().filter(|s| s.embedding_refs.is_empty()) {
        let _ = writeln!(excl, "{}\t{}\tno slides; excluded from pathology modeling", s.subject_id, s.dataset_id);
    }
    w.write_stamped("exclusions.tsv", &excl)?;
    w.note("subjects", subjects.len().to_string());
    w.note("slides", slides.len().to_string());
    w.finish()?;
    Ok(())
}

fn summary_tsv(subjects: &[SubjectRecord]) -> String {
    let mut groups: BTreeMap<&str, Vec<&SubjectRecord>> = BTreeMap::new();
    for s in subjects {
        groups.entry(s.dataset_id.as_str()).or_default().push(s);
    }
    let mut out = String::from("dataset\tn\twith_slides");
    for e in Endpoint::ALL {
        let _ = write!(out, "\tevents_{e}");
    }
    out.push_str("\tunknown_er\tunknown_pr\tunknown_her2\tunknown_t_stage\tunknown_n_stage\tunknown_idc\tunknown_ilc\tmissing_grade\tmissing_race\tmissing_oncotype\n");
    for (d, rows) in groups {
        let count = |f: &dyn Fn(&SubjectRecord) -> bool| rows.iter().filter(|s| f(s)).count();
        let _ = write!(out, "{d}\t{}\t{}", rows.len(), count(&|s| !s.embedding_refs.is_empty()));
        for e in Endpoint::ALL {
            let _ = write!(out, "\t{}", count(&|s| s.endpoint(e).event));
        }
        let unknown = |v: String| v == "unknown";
        let _ = writeln!(
            out,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            count(&|s| unknown(s.clinical.er.to_string())),
            count(&|s| unknown(s.clinical.pr.to_string())),
            count(&|s| unknown(s.clinical.her2.to_string())),
            count(&|s| unknown(s.clinical.t_stage.to_string())),
            count(&|s| unknown(s.clinical.n_stage.to_string())),
            count(&|s| unknown(s.clinical.idc.to_string())),
            count(&|s| unknown(s.clinical.ilc.to_string())),
            count(&|s| s.clinical.grade.is_none()),
            count(&|s| s.clinical.race.is_none()),
            count(&|s| s.clinical.oncotype_score.is_none()),
        );
    }
    out
}

fn endpoints_tsv(subjects: &[SubjectRecord]) -> String {
    let mut out = String::from("subject_id\tdataset_id");
    for e in Endpoint::ALL {
        let _ = write!(out, "\t{e}_time\t{e}_event");
    }
    out.push('\n');
    for s in subjects {
        let _ = write!(out, "{}\t{}", s.subject_id, s.dataset_id);
        for e in Endpoint::ALL {
            let o = s.endpoint(e);
            let _ = write!(out, "\t{}\t{}", o.time, u8::from(o.event));
        }
        out.push('\n');
    }
    out
}

fn image_files(dir: &std::path::Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::missing(dir, e.to_string()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| ["png", "pgm", "ppm", "pnm", "pbm"].contains(&x.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::missing(dir, "no PNG/PNM images"));
    }
    Ok(files)
}

/// Otsu segmentation and patch grids for every image in the images directory.
pub fn tile(ctx: &Context) -> Result<()> {
    let mut w = StageWriter::begin(ctx, "tile")?;
    let files = image_files(&ctx.paths.images)?;
    let section = &ctx.cfg.tiling;
    let manifests: Vec<(PathBuf, usize, usize, PatchManifest)> = files
        .par_iter()
        .map(|f| {
            let img = GrayImage::open(f).map_err(|e| CliError::Validation(e.to_string()))?;
            let slide = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let m = extract_patches(&img, &slide, section.mpp, &section.grid)
                .map_err(|e| CliError::Validation(format!("{}: {e}", f.display())))?;
            Ok((f.clone(), img.width, img.height, m))
        })
        .collect::<Result<_>>()?;
    let mut slides = String::from("slide_id\twidth\theight\tthreshold\tpatch_size\tpatches\ttoo_small\n");
    for (f, width, height, m) in &manifests {
        w.input(f)?;
        let _ = writeln!(
            slides,
            "{}\t{width}\t{height}\t{}\t{}\t{}\t{}",
            m.slide_id,
            m.threshold,
            m.patch_size,
            m.coords.len(),
            m.too_small
        );
    }
    let all: Vec<PatchManifest> = manifests.into_iter().map(|(_, _, _, m)| m).collect();
    w.write_stamped("patches.tsv", &manifest_tsv(&all))?;
    w.write_stamped("slides.tsv", &slides)?;
    w.finish()?;
    Ok(())
}
