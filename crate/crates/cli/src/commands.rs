//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Subcommand};
use log::{info, warn};
use serde::Serialize;

use detail_core::bake::{bake_normal_map, FrameSource};
use detail_core::mesh::{list_obj_files, load_mesh_sequence, read_trimesh_obj, TriMesh};
use detail_core::normal_map::{read_meta, write_json, write_sequence, META_FILE};
use detail_core::procedural::{
    generate_pair_sequence, ingest_simulated_pairs, write_pair_sequence, MapPair, ProceduralSpec, COARSE_DIR,
};
use detail_core::recovery::{deform_to_normals, mean_angular_error, resolve_penetrations, upsample_mesh, RecoveryProblem};
use detail_core::{MaterialLabel, NormalMapFrame};
use detail_nets::backbone::{Backbone, BackboneSource};
use detail_nets::classifier::{
    labelled_features, load_classifier, save_classifier, train_classifier, vote_sequence, Classifier, ClassifierMeta,
    LabelledFrames, Vote,
};
use detail_nets::enhancer::Enhancer;
use detail_nets::evaluate::{distribution_distance, enhance_frame, frame_improvement, summarize, EvalReport};
use detail_nets::gram::{LayerConfig, LossNetwork, StylePool};
use detail_nets::train::{history_csv, load_enhancer, sample_exemplars, TrainSequence, Trainer};

use crate::config::PipelineConfig;
use crate::data::{load_at_density, load_labelled_pairs, pair_dirs, to_density};
use crate::{CliError, Global};

type Result<T> = std::result::Result<T, CliError>;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn loss_network(backbone: &BackboneSource, layers: &LayerConfig) -> Result<LossNetwork<f32>> {
    Ok(LossNetwork::new(Backbone::<f32>::load(backbone)?, layers)?)
}

fn frame_obj_name(index: usize) -> String {
    format!("frame_{index:04}.obj")
}

// ---------------------------------------------------------------- config

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Print the built-in defaults instead of the effective configuration.
    #[arg(long)]
    defaults: bool,
}

pub fn config(global: &Global, args: &ConfigArgs) -> Result<()> {
    if args.defaults {
        print!("{}", PipelineConfig::defaults_toml());
        return Ok(());
    }
    let cfg = match &global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    }
    .with_seed(global.seed);
    print!("{}", toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?);
    Ok(())
}

// ---------------------------------------------------------------- generate

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Material preset of the sequence.
    #[arg(long)]
    material: String,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 384)]
    width: usize,
    #[arg(long, default_value_t = 384)]
    height: usize,
    /// Time index of the first frame; a later segment continues the same sequence.
    #[arg(long, default_value_t = 0)]
    start_frame: usize,
}

pub fn generate(cfg: &PipelineConfig, out: &Path, args: &GenerateArgs) -> Result<()> {
    let spec = ProceduralSpec {
        start_frame: args.start_frame,
        ..ProceduralSpec::preset(&args.material, args.width, args.height, args.frames, cfg.seed)?
    };
    let pairs = generate_pair_sequence(&spec, &cfg.materials)?;
    write_pair_sequence(out, &pairs, &args.material, Some(&spec))?;
    info!("wrote {} {} pairs to {}", pairs.len(), args.material, out.display());
    Ok(())
}

// ---------------------------------------------------------------- bake

#[derive(Args, Debug)]
pub struct BakeArgs {
    /// Per-frame OBJ sequence baked with its own tangent frames.
    #[arg(long, conflicts_with_all = ["fine_meshes", "coarse_meshes"])]
    meshes: Option<PathBuf>,
    /// Fine simulation OBJ sequence; writes a training pair sequence.
    #[arg(long)]
    fine_meshes: Option<PathBuf>,
    /// Coarse simulation OBJ sequence; its maps are written to `test/`.
    #[arg(long, requires = "fine_meshes")]
    coarse_meshes: Option<PathBuf>,
    /// Material label recorded in the metadata.
    #[arg(long)]
    material: Option<String>,
}

pub fn bake(cfg: &PipelineConfig, out: &Path, args: &BakeArgs) -> Result<()> {
    if let Some(m) = &args.material {
        MaterialLabel::from_name(m, &cfg.materials)?;
    }
    if let Some(dir) = &args.meshes {
        let meshes = load_mesh_sequence(dir)?;
        let mut frames = Vec::with_capacity(meshes.len());
        let mut stats = Vec::with_capacity(meshes.len());
        for (i, mesh) in meshes.iter().enumerate() {
            let (map, s) = bake_normal_map(mesh, &cfg.bake.options(i), FrameSource::Own)?;
            frames.push(map);
            stats.push(serde_json::json!({
                "degenerate_faces": s.degenerate_faces,
                "overlap_pixels": s.overlap_pixels,
                "covered_pixels": s.covered_pixels,
            }));
        }
        write_sequence(out, &frames, args.material.as_deref(), serde_json::json!({ "bake": stats }))?;
        info!("baked {} frames to {}", frames.len(), out.display());
        return Ok(());
    }
    let Some(fine) = &args.fine_meshes else {
        return Err(CliError::Config("bake needs --meshes or --fine-meshes".into()));
    };
    let Some(material) = &args.material else {
        return Err(CliError::Config("--fine-meshes needs --material".into()));
    };
    let label = MaterialLabel::from_name(material, &cfg.materials)?;
    let corpus = ingest_simulated_pairs(args.coarse_meshes.as_deref(), fine, &cfg.bake.options(0))?;
    let pairs: Vec<MapPair> =
        corpus.train.into_iter().map(|(coarse, fine)| MapPair { coarse, fine, label }).collect();
    write_pair_sequence(out, &pairs, material, None)?;
    if !corpus.test.is_empty() {
        write_sequence(&out.join("test"), &corpus.test, Some(material), serde_json::Value::Null)?;
    }
    info!("ingested {} pairs ({} test maps) to {}", pairs.len(), corpus.test.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Pair sequences, or directories of pair sequences.
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

pub fn train(cfg: &PipelineConfig, out: &Path, args: &TrainArgs) -> Result<()> {
    let mut tcfg = cfg.train.clone();
    if let Some(s) = args.steps {
        tcfg.steps = s;
    }
    tcfg.validate().map_err(|e| CliError::Config(format!("`train`: {e}")))?;
    let ppm = cfg.patch.pixels_per_meter;
    let mut data = Vec::new();
    for s in load_labelled_pairs(&args.data, &cfg.materials)? {
        let pairs = s
            .pairs
            .coarse
            .into_iter()
            .zip(s.pairs.fine)
            .map(|(c, f)| Ok((c, to_density(f, ppm)?)))
            .collect::<Result<Vec<_>>>()?;
        data.push(TrainSequence::new(s.label, &pairs)?);
    }
    let loss_net = loss_network(&cfg.backbone, &cfg.layers)?;
    let resumed = args.resume.as_deref().map(load_enhancer).transpose()?;
    let net = match &resumed {
        Some(r) => {
            if r.meta.vocabulary != cfg.materials {
                return Err(CliError::Config("checkpoint vocabulary differs from `materials`".into()));
            }
            r.net.clone()
        }
        None => Enhancer::<f32>::new(cfg.enhancer_config(cfg.seed))?,
    };
    let mut trainer = Trainer::new(net, &loss_net, &data, tcfg)?;
    if let Some(r) = resumed {
        let (m, v) = r.moments.ok_or_else(|| CliError::Data("checkpoint carries no optimiser state".into()))?;
        let params = r.net.params.clone();
        trainer.restore(params, m, v, &r.meta)?;
        info!("resumed at step {}", trainer.step);
    }
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let vocabulary = cfg.materials.clone();
    trainer.run(|t| {
        let path = ckpt_dir.join(format!("step_{:06}.safetensors", t.step));
        t.save(&path, &t.meta(&vocabulary, &cfg.layers, &cfg.backbone))?;
        info!("checkpoint {}", path.display());
        Ok(())
    })?;
    trainer.save(&out.join("enhancer.safetensors"), &trainer.meta(&vocabulary, &cfg.layers, &cfg.backbone))?;
    write_text(&out.join("loss.csv"), &history_csv(&trainer.history))?;
    info!("trained {} steps; model in {}", trainer.step, out.display());
    Ok(())
}

// ---------------------------------------------------------------- classify

#[derive(Subcommand, Debug)]
pub enum ClassifyCommand {
    /// Train the classifier on labelled pair sequences (coarse inputs).
    Train(ClassifyTrainArgs),
    /// Predict the material of sequences by soft voting.
    Vote(ClassifyVoteArgs),
}

#[derive(Args, Debug)]
pub struct ClassifyTrainArgs {
    #[arg(long = "data", required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Shuffle the training labels (chance-level control).
    #[arg(long)]
    permute_labels: bool,
}

#[derive(Args, Debug)]
pub struct ClassifyVoteArgs {
    /// Normal-map sequences, or pair sequences (their coarse maps are used).
    #[arg(long = "input", required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Serialize)]
struct VoteRecord {
    input: PathBuf,
    expected: Option<String>,
    predicted: String,
    correct: Option<bool>,
    vote: Vote,
}

#[derive(Serialize)]
struct VoteReport {
    accuracy: Option<f64>,
    results: Vec<VoteRecord>,
}

pub fn classify(cfg: &PipelineConfig, out: &Path, cmd: &ClassifyCommand) -> Result<()> {
    match cmd {
        ClassifyCommand::Train(a) => classify_train(cfg, out, a),
        ClassifyCommand::Vote(a) => classify_vote(cfg, out, a),
    }
}

fn classify_train(cfg: &PipelineConfig, out: &Path, args: &ClassifyTrainArgs) -> Result<()> {
    let ppm = cfg.patch.pixels_per_meter;
    let mut seqs = Vec::new();
    for s in load_labelled_pairs(&args.data, &cfg.materials)? {
        let frames = s.pairs.coarse.into_iter().map(|f| to_density(f, ppm)).collect::<Result<Vec<_>>>()?;
        seqs.push((s.label, frames));
    }
    let labelled: Vec<LabelledFrames<'_>> =
        seqs.iter().map(|(label, frames)| LabelledFrames { label: *label, frames }).collect();
    let loss_net = loss_network(&cfg.backbone, &cfg.layers)?;
    let ccfg = &cfg.classifier;
    let (features, labels) = labelled_features(&loss_net, &labelled, ccfg.crops_per_frame, &ccfg.feature_layer, ccfg.seed)?;
    let dim = features.first().map(Vec::len).ok_or_else(|| CliError::Data("no training crops".into()))?;
    let net = Classifier::new(ccfg.clone(), dim, cfg.materials.len())?;
    let (net, history) = train_classifier(net, &features, &labels, args.permute_labels)?;
    if let Some(last) = history.last() {
        info!("classifier trained on {} crops: loss {:.4}, train accuracy {:.3}", features.len(), last.loss, last.train_accuracy);
    }
    create_dir(out)?;
    let meta = ClassifierMeta {
        vocabulary: cfg.materials.clone(),
        config: ccfg.clone(),
        backbone: cfg.backbone.clone(),
        input_dim: dim,
        history,
    };
    save_classifier(&out.join("classifier.safetensors"), &net, &meta)?;
    Ok(())
}

fn classifier_path(cfg: &PipelineConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.paths.classifier.clone())
        .ok_or_else(|| CliError::Config("no classifier given (--classifier or `paths.classifier`)".into()))
}

/// Frames of `dir` at the network density; pair directories contribute
/// their coarse maps.
fn vote_frames(cfg: &PipelineConfig, dir: &Path) -> Result<(Option<String>, Vec<NormalMapFrame>)> {
    let seq_dir = if dir.join(META_FILE).is_file() { dir.to_path_buf() } else { dir.join(COARSE_DIR) };
    let (meta, mut frames) = load_at_density(&seq_dir, cfg.patch.pixels_per_meter)?;
    if cfg.vote.max_frames > 0 {
        frames.truncate(cfg.vote.max_frames);
    }
    Ok((meta.material, frames))
}

fn run_vote(cfg: &PipelineConfig, loss_net: &LossNetwork<f32>, net: &Classifier, frames: &[NormalMapFrame]) -> Result<Vote> {
    Ok(vote_sequence(loss_net, net, frames, cfg.vote.patches_per_frame, cfg.seed)?)
}

fn classify_vote(cfg: &PipelineConfig, out: &Path, args: &ClassifyVoteArgs) -> Result<()> {
    let (net, meta) = load_classifier(&classifier_path(cfg, args.classifier.as_deref())?)?;
    let loss_net = loss_network(&meta.backbone, &cfg.layers)?;
    let mut results = Vec::new();
    for dir in &args.input {
        let (expected, frames) = vote_frames(cfg, dir)?;
        let vote = run_vote(cfg, &loss_net, &net, &frames)?;
        let predicted = meta.vocabulary[vote.label].clone();
        let correct = expected.as_ref().map(|e| *e == predicted);
        info!("{}: {predicted} (expected {})", dir.display(), expected.as_deref().unwrap_or("?"));
        results.push(VoteRecord { input: dir.clone(), expected, predicted, correct, vote });
    }
    let known: Vec<bool> = results.iter().filter_map(|r| r.correct).collect();
    let accuracy = (!known.is_empty()).then(|| known.iter().filter(|&&c| c).count() as f64 / known.len() as f64);
    create_dir(out)?;
    write_json(&out.join("votes.json"), &VoteReport { accuracy, results })?;
    Ok(())
}

// ---------------------------------------------------------------- enhance

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    /// Coarse normal-map sequence.
    #[arg(long)]
    input: PathBuf,
    /// Enhancer checkpoint (defaults to `paths.enhancer`).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Material name; predicted by the classifier when omitted.
    #[arg(long)]
    material: Option<String>,
    /// Classifier checkpoint (defaults to `paths.classifier`).
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Serialize)]
struct Provenance {
    input: PathBuf,
    model: PathBuf,
    material: String,
    material_index: usize,
    /// `given` or `predicted`.
    source: &'static str,
    stride: usize,
    vote: Option<Vote>,
}

pub fn enhance(cfg: &PipelineConfig, out: &Path, args: &EnhanceArgs) -> Result<()> {
    let model = args
        .model
        .clone()
        .or_else(|| cfg.paths.enhancer.clone())
        .ok_or_else(|| CliError::Config("no model given (--model or `paths.enhancer`)".into()))?;
    let loaded = load_enhancer(&model)?;
    let vocabulary = &loaded.meta.vocabulary;
    let (_, frames) = load_at_density(&args.input, cfg.patch.pixels_per_meter)?;
    let (label, source, vote) = match &args.material {
        Some(name) => (MaterialLabel::from_name(name, vocabulary)?, "given", None),
        None => {
            let (clf, meta) = load_classifier(&classifier_path(cfg, args.classifier.as_deref())?)?;
            if &meta.vocabulary != vocabulary {
                return Err(CliError::Config("classifier and enhancer vocabularies differ".into()));
            }
            let loss_net = loss_network(&meta.backbone, &cfg.layers)?;
            let mut voting = frames.clone();
            if cfg.vote.max_frames > 0 {
                voting.truncate(cfg.vote.max_frames);
            }
            let vote = run_vote(cfg, &loss_net, &clf, &voting)?;
            if let Some(t) = &vote.tie {
                warn!("material vote tied between {t:?}; using the lowest index");
            }
            (MaterialLabel::new(vote.label, vocabulary.len())?, "predicted", Some(vote))
        }
    };
    let name = vocabulary[label.index()].clone();
    info!("enhancing {} frames as {name} ({source})", frames.len());
    let enhanced = frames
        .iter()
        .map(|f| Ok(enhance_frame(&loaded.net, f, &label, cfg.patch.stride)?))
        .collect::<Result<Vec<_>>>()?;
    write_sequence(out, &enhanced, Some(&name), serde_json::Value::Null)?;
    let prov = Provenance {
        input: args.input.clone(),
        model,
        material: name,
        material_index: label.index(),
        source,
        stride: cfg.patch.stride,
        vote,
    };
    write_json(&out.join("provenance.json"), &prov)?;
    Ok(())
}

// ---------------------------------------------------------------- lift

#[derive(Args, Debug)]
pub struct LiftArgs {
    /// Coarse garment OBJ sequence.
    #[arg(long)]
    meshes: PathBuf,
    /// Enhanced normal-map sequence, one frame per mesh.
    #[arg(long, required_unless_present = "bake_only")]
    maps: Option<PathBuf>,
    /// Closed body mesh: one OBJ for all frames or a per-frame directory.
    #[arg(long)]
    body: Option<PathBuf>,
    /// Only bake the coarse meshes and copy them out; no optimisation.
    #[arg(long)]
    bake_only: bool,
}

#[derive(Serialize)]
struct LiftFrame {
    frame: usize,
    vertices: usize,
    angular_error_before: f64,
    angular_error_after: f64,
    deform_iterations: usize,
    deform_converged: bool,
    penetrating_before: Option<f64>,
    penetrating_after: Option<f64>,
    snapped: usize,
}

fn body_meshes(path: &Path, frames: usize) -> Result<Vec<Arc<TriMesh>>> {
    if path.is_dir() {
        let files = list_obj_files(path)?;
        if files.len() != frames {
            return Err(CliError::Data(format!("{} body meshes for {frames} garment frames", files.len())));
        }
        files.iter().map(|f| Ok(Arc::new(read_trimesh_obj(f)?))).collect()
    } else {
        let body = Arc::new(read_trimesh_obj(path)?);
        body.check_closed()?;
        Ok(vec![body; frames])
    }
}

pub fn lift(cfg: &PipelineConfig, out: &Path, args: &LiftArgs) -> Result<()> {
    let files = list_obj_files(&args.meshes)?;
    let meshes = load_mesh_sequence(&args.meshes)?;
    create_dir(out)?;
    if args.bake_only {
        let mut maps = Vec::with_capacity(meshes.len());
        for (i, mesh) in meshes.iter().enumerate() {
            maps.push(bake_normal_map(mesh, &cfg.bake.options(i), FrameSource::Own)?.0);
            mesh.write_obj(&out.join(frame_obj_name(i)))?;
        }
        write_sequence(&out.join("maps"), &maps, None, serde_json::Value::Null)?;
        info!("baked {} coarse frames to {}", maps.len(), out.display());
        return Ok(());
    }
    let maps_dir = args.maps.as_ref().expect("clap enforces --maps");
    let (_, maps) = detail_core::normal_map::read_sequence(maps_dir)?;
    if maps.len() != meshes.len() {
        return Err(CliError::Data(format!("{} maps for {} meshes in {}", maps.len(), meshes.len(), args.meshes.display())));
    }
    let bodies = args.body.as_deref().map(|p| body_meshes(p, meshes.len())).transpose()?;
    let rc = &cfg.recovery;
    let mut report = Vec::with_capacity(meshes.len());
    for (i, (mesh, map)) in meshes.into_iter().zip(&maps).enumerate() {
        let up = upsample_mesh(&mesh, rc.subdivision_levels)?;
        let problem = RecoveryProblem::new(up, map, rc.weights())
            .map_err(|e| CliError::Data(format!("{}: {e}", files[i].display())))?;
        let before = mean_angular_error(&problem.mesh, &problem.mesh.positions, &problem.target_normals);
        let deformed = deform_to_normals(&problem, &rc.deform())?;
        let after = mean_angular_error(&problem.mesh, &deformed.positions, &problem.target_normals);
        let mut result = problem.mesh.clone();
        let mut frame = LiftFrame {
            frame: i,
            vertices: result.positions.len(),
            angular_error_before: before,
            angular_error_after: after,
            deform_iterations: deformed.iterations,
            deform_converged: deformed.converged,
            penetrating_before: None,
            penetrating_after: None,
            snapped: 0,
        };
        result.positions = match &bodies {
            Some(b) => {
                let pen = resolve_penetrations(&problem.mesh, &deformed.positions, &b[i], &rc.penetration())?;
                frame.penetrating_before = Some(pen.max_depth_before);
                frame.penetrating_after = Some(pen.max_depth_after);
                frame.snapped = pen.snapped.len();
                pen.positions
            }
            None => deformed.positions,
        };
        result.body = None;
        result.write_obj(&out.join(frame_obj_name(i)))?;
        info!("frame {i}: angular error {before:.4} -> {after:.4} rad");
        report.push(frame);
    }
    write_json(&out.join("lift_report.json"), &report)?;
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    coarse: PathBuf,
    #[arg(long)]
    enhanced: PathBuf,
    /// Ground-truth fine sequence.
    #[arg(long)]
    reference: PathBuf,
    /// Fine exemplar sources for the improvement style pool (defaults to the reference).
    #[arg(long, num_args = 1..)]
    exemplars: Vec<PathBuf>,
    /// Also write the 2-D embedding as `embedding.png`.
    #[arg(long)]
    plot: bool,
}

pub fn eval(cfg: &PipelineConfig, out: &Path, args: &EvalArgs) -> Result<()> {
    let ppm = cfg.patch.pixels_per_meter;
    let (_, coarse) = load_at_density(&args.coarse, ppm)?;
    let (_, enhanced) = load_at_density(&args.enhanced, ppm)?;
    let (ref_meta, reference) = load_at_density(&args.reference, ppm)?;
    let loss_net = loss_network(&cfg.backbone, &cfg.layers)?;
    let distribution = distribution_distance(&loss_net, &coarse, &enhanced, &reference, cfg.eval.patches_per_frame, cfg.seed)?;
    let aligned = coarse.len() == reference.len()
        && enhanced.len() == reference.len()
        && reference.iter().zip(&coarse).zip(&enhanced).all(|((r, c), e)| {
            (r.width, r.height) == (c.width, c.height) && (r.width, r.height) == (e.width, e.height)
        });
    let improvement = if aligned {
        let mut exemplar_frames = Vec::new();
        for dir in &args.exemplars {
            for d in exemplar_dirs(dir)? {
                exemplar_frames.extend(load_at_density(&d, ppm)?.1);
            }
        }
        let pool_frames: Vec<&NormalMapFrame> =
            if exemplar_frames.is_empty() { reference.iter().collect() } else { exemplar_frames.iter().collect() };
        let sigs = sample_exemplars(&loss_net, &pool_frames, cfg.eval.pool_size, 0.5, cfg.seed)?;
        let pool = StylePool::new(&sigs)?;
        let frames = (0..reference.len())
            .map(|i| {
                let seed = cfg.seed.wrapping_add(i as u64);
                Ok(frame_improvement(&loss_net, &pool, &coarse[i], &enhanced[i], &reference[i], cfg.eval.improvement_patches, seed)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(summarize(frames)?)
    } else {
        warn!("sequences are not frame-aligned; skipping the improvement score");
        None
    };
    let report = EvalReport {
        material: ref_meta.material,
        patches_per_frame: cfg.eval.patches_per_frame,
        seed: cfg.seed,
        improvement,
        distribution,
    };
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    if let Some(s) = &report.improvement {
        info!("improvement {:.2} ± {:.2}", s.mean, s.std);
    }
    let d = &report.distribution;
    info!("C1 {:.5}, C2 {:.5}, DR {:?}", d.c1, d.c2, d.dr);
    if args.plot {
        crate::plot::save_embedding(d, &out.join("embedding.png"))?;
    }
    Ok(())
}

/// Exemplar sources: sequence directories, or pair sequences (fine maps).
fn exemplar_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if read_meta(dir).is_ok() {
        return Ok(vec![dir.to_path_buf()]);
    }
    Ok(pair_dirs(dir)?.into_iter().map(|d| d.join(detail_core::procedural::FINE_DIR)).collect())
}
