//! Command line frontend: train, fuse, generate, and evaluate on the
//! built-in testbed. Every run writes a manifest.json recording the
//! config hash and inputs needed to reproduce its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use showflow::adapters::AdapterKind;
use showflow::concepts::{ConceptRegistry, Vocabulary};
use showflow::fusion::{collect_activations, fuse_model, ConceptContribution, ProbeSpec};
use showflow::pipeline::{
    evaluate_image, generate_multi, generate_single, items_from_dataset, make_backend,
    map_to_image, train_single, AdapterCheckpoint, FusedCheckpoint, MultiOptions, RunConfig,
    RunManifest, TrainItem,
};
use showflow::testbed::{
    derive_seed, make_dataset, save_image_png, DatasetSpec, Denoiser, SynthConceptDataset,
    TextEncoder, MODEL_DIM,
};
use showflow::Real;

#[derive(Parser)]
#[command(name = "showflow", version, about = "Concept personalization toolkit")]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic concept dataset.
    MakeDataset(MakeDatasetArgs),
    /// Train one concept's adapters and tokens.
    TrainSingle(TrainSingleArgs),
    /// Merge per-concept adapter checkpoints into one fused model.
    Fuse(FuseArgs),
    /// Sample one image from an adapter checkpoint.
    Generate(GenerateArgs),
    /// Multi-concept sampling from a fused checkpoint.
    GenerateMulti(GenerateMultiArgs),
    /// Score an image against reference images and a prompt.
    Eval(EvalArgs),
}

#[derive(Args)]
struct MakeDatasetArgs {
    /// Output directory (default: the config's dataset dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Images per concept.
    #[arg(long, default_value_t = 4)]
    images_per_concept: usize,
    /// Dataset spec JSON; default is the built-in circle/square pair.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the data seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainSingleArgs {
    /// Concept name as it appears in prompts (without angle brackets).
    #[arg(long)]
    concept: String,
    /// Base-vocabulary class word the concept decomposes over.
    #[arg(long)]
    class_word: String,
    /// Dataset directory (default: the config's dataset dir).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory (default: {out_dir}/train-{concept}).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Override the adapter kind: lora, krona, or krona_wed.
    #[arg(long)]
    adapter: Option<String>,
    /// Override the Kronecker factor / LoRA rank.
    #[arg(long)]
    factor: Option<usize>,
    /// Override the attention-regularization weight.
    #[arg(long)]
    lambda_attn: Option<f64>,
}

#[derive(Args)]
struct FuseArgs {
    /// Adapter checkpoints to merge (two or more).
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory (default: {out_dir}/fused).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the ridge weight.
    #[arg(long)]
    mu: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Adapter checkpoint to sample from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt; concept tokens use `<name>` syntax.
    #[arg(long)]
    prompt: String,
    /// Override the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the sampler step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory (default: {out_dir}/generate).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateMultiArgs {
    /// Fused checkpoint to sample from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prompt; concept tokens use `<name>` syntax.
    #[arg(long)]
    prompt: String,
    /// Override the sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the sampler step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Disable matching-attention value injection.
    #[arg(long)]
    no_sama: bool,
    /// Disable layout-consistency guidance.
    #[arg(long)]
    no_guidance: bool,
    /// Also write per-step concept masks and flow stats.
    #[arg(long)]
    dump_masks: bool,
    /// Output directory (default: {out_dir}/generate-multi).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Image to score (PNG written by generate / generate-multi).
    #[arg(long)]
    image: PathBuf,
    /// Dataset directory providing per-concept reference images.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Prompt the image was generated from.
    #[arg(long)]
    prompt: String,
    /// Comma-separated concept names to score (default: all in the dataset).
    #[arg(long)]
    concepts: Option<String>,
    /// Embedding backend name.
    #[arg(long, default_value = "stub")]
    backend: String,
    /// Output directory (default: {out_dir}/eval).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        let code = err
            .downcast_ref::<showflow::Error>()
            .map(showflow::Error::exit_code)
            .unwrap_or(1);
        std::process::exit(code);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::MakeDataset(args) => cmd_make_dataset(&config, &args),
        Command::TrainSingle(args) => cmd_train_single(config, &args),
        Command::Fuse(args) => cmd_fuse(&config, &args),
        Command::Generate(args) => cmd_generate(config, &args),
        Command::GenerateMulti(args) => cmd_generate_multi(config, &args),
        Command::Eval(args) => cmd_eval(&config, &args),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(RunConfig::from_json(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

/// Fresh frozen base model, registry, and text encoder from the model seed.
fn fresh_stack(config: &RunConfig) -> (Denoiser<Real>, ConceptRegistry<Real>, TextEncoder<Real>) {
    let seed = config.seeds.model;
    (
        Denoiser::new(seed),
        ConceptRegistry::new(Vocabulary::builtin(MODEL_DIM, seed)),
        TextEncoder::new(MODEL_DIM, seed),
    )
}

fn parse_adapter_kind(tag: &str) -> Result<AdapterKind> {
    match tag {
        "lora" => Ok(AdapterKind::Lora),
        "krona" => Ok(AdapterKind::Krona),
        "krona_wed" => Ok(AdapterKind::KronaWed),
        other => Err(showflow::Error::config(format!(
            "unknown adapter kind '{other}' (expected lora, krona, or krona_wed)"
        ))
        .into()),
    }
}

fn prepare_out_dir(config: &RunConfig, explicit: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(p) => p.to_path_buf(),
        None => Path::new(&config.paths.out_dir).join(default_name),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_make_dataset(config: &RunConfig, args: &MakeDatasetArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading spec {}", path.display()))?;
            let mut spec: DatasetSpec = serde_json::from_str(&text)
                .map_err(|e| showflow::Error::config(format!("dataset spec: {e}")))?;
            spec.images_per_concept = args.images_per_concept;
            spec
        }
        None => DatasetSpec::default_pair(args.images_per_concept),
    };
    let seed = args.seed.unwrap_or(config.seeds.data);
    let dataset = make_dataset::<Real>(&spec, seed)?;
    let dir = match &args.out {
        Some(p) => p.clone(),
        None => PathBuf::from(&config.paths.dataset_dir),
    };
    fs::create_dir_all(&dir)?;
    dataset.save(&dir)?;

    let mut manifest = RunManifest::new("make-dataset", config);
    manifest.note("data_seed", seed);
    manifest.note("images", dataset.items.len());
    if let Some(path) = &args.spec {
        manifest.record_input("spec", path)?;
    }
    manifest.save(&dir.join("manifest.json"))?;
    info!("wrote {} images under {}", dataset.items.len(), dir.display());
    Ok(())
}

fn cmd_train_single(mut config: RunConfig, args: &TrainSingleArgs) -> Result<()> {
    if let Some(steps) = args.steps {
        config.train.steps = steps;
    }
    if let Some(lr) = args.learning_rate {
        config.train.learning_rate = lr;
    }
    if let Some(kind) = &args.adapter {
        config.adapter.kind = parse_adapter_kind(kind)?;
    }
    if let Some(factor) = args.factor {
        config.adapter.factor = factor;
    }
    if let Some(lambda) = args.lambda_attn {
        config.loss.lambda_attn = lambda;
    }
    config.validate()?;

    let dataset_dir = args
        .dataset
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.paths.dataset_dir));
    let dataset = SynthConceptDataset::<Real>::load(&dataset_dir)?;
    let items: Vec<TrainItem<Real>> = items_from_dataset(&dataset, &args.concept)?;

    let (mut den, mut registry, encoder) = fresh_stack(&config);
    let output = train_single(
        &config,
        &mut den,
        &mut registry,
        &encoder,
        &args.concept,
        &args.class_word,
        &items,
    )?;

    let dir = prepare_out_dir(&config, args.out.as_deref(), &format!("train-{}", args.concept))?;
    let ckpt_path = dir.join("adapter.ckpt");
    output.checkpoint.save(&ckpt_path)?;
    fs::write(dir.join("train_log.txt"), output.log_table())?;

    let mut manifest = RunManifest::new("train-single", &config);
    manifest.record_input("dataset", &dataset_dir.join("index.txt"))?;
    manifest.note("concept", &args.concept);
    manifest.note("class_word", &args.class_word);
    manifest.note("theta0_sha256", hex(&output.theta0));
    manifest.save(&dir.join("manifest.json"))?;

    let first = &output.log[0];
    let last = &output.log[output.log.len() - 1];
    info!(
        "trained '{}' for {} steps: total loss {:.6} -> {:.6}; checkpoint {}",
        args.concept,
        output.log.len(),
        first.terms.total,
        last.terms.total,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_fuse(config: &RunConfig, args: &FuseArgs) -> Result<()> {
    let mu = args.mu.or(config.fusion.mu);
    let mut contributions = Vec::new();
    let mut all_concepts = Vec::new();
    for (idx, path) in args.inputs.iter().enumerate() {
        let ckpt = AdapterCheckpoint::<Real>::load(path)?;
        if ckpt.concepts.is_empty() {
            bail!("checkpoint {} carries no concepts", path.display());
        }
        let concept = ckpt.concepts[0].name.clone();
        if all_concepts.iter().any(|c: &showflow::pipeline::TrainedConcept<Real>| {
            ckpt.concepts.iter().any(|d| d.name == c.name)
        }) {
            bail!("concept '{concept}' appears in more than one input checkpoint");
        }

        let (mut den, mut registry, encoder) = fresh_stack(config);
        ckpt.apply(&mut den, &mut registry)?;
        let deltas = den
            .adapters()
            .iter()
            .map(|(layer, adapter)| {
                let w0 = den.base_weight(layer)?;
                Ok((layer.clone(), showflow::fusion::adapter_delta(w0, adapter)))
            })
            .collect::<showflow::Result<_>>()?;
        let probes =
            ProbeSpec::reference(&concept, derive_seed(config.seeds.sample, idx as u64));
        let activations = collect_activations(&den, &registry, &encoder, &probes)?;
        contributions.push(ConceptContribution { concept, deltas, activations });
        all_concepts.extend(ckpt.concepts);
    }

    let (deltas, report) = fuse_model(&contributions, mu)?;
    let fused = FusedCheckpoint { deltas, concepts: all_concepts };

    let dir = prepare_out_dir(config, args.out.as_deref(), "fused")?;
    let out_path = dir.join("fused.ckpt");
    fused.save(&out_path)?;
    fs::write(dir.join("fusion_residuals.txt"), report.to_table())?;

    let mut manifest = RunManifest::new("fuse", config);
    for (idx, path) in args.inputs.iter().enumerate() {
        manifest.record_input(&format!("adapter_{idx}"), path)?;
    }
    if let Some(worst) = report.worst() {
        manifest.note(
            "worst_residual",
            format!("{:.6} ({} / {})", worst.residual, worst.layer, worst.concept),
        );
    }
    manifest.save(&dir.join("manifest.json"))?;
    info!(
        "fused {} concepts into {}; worst relative residual {:.6}",
        contributions.len(),
        out_path.display(),
        report.worst().map(|w| w.residual).unwrap_or(0.0)
    );
    Ok(())
}

fn cmd_generate(mut config: RunConfig, args: &GenerateArgs) -> Result<()> {
    if let Some(steps) = args.steps {
        config.sampler.steps = steps;
    }
    config.validate()?;
    let seed = args.seed.unwrap_or(config.seeds.sample);

    let (mut den, mut registry, encoder) = fresh_stack(&config);
    let ckpt = AdapterCheckpoint::<Real>::load(&args.checkpoint)?;
    ckpt.apply(&mut den, &mut registry)?;

    let out =
        generate_single(&den, &registry, &encoder, &args.prompt, seed, config.sampler.steps)?;
    let dir = prepare_out_dir(&config, args.out.as_deref(), "generate")?;
    let image_path = dir.join("image.png");
    save_image_png(&out.image, &image_path)?;

    let mut manifest = RunManifest::new("generate", &config);
    manifest.record_input("checkpoint", &args.checkpoint)?;
    manifest.note("prompt", &args.prompt);
    manifest.note("seed", seed);
    manifest.save(&dir.join("manifest.json"))?;
    info!("wrote {}", image_path.display());
    Ok(())
}

fn cmd_generate_multi(mut config: RunConfig, args: &GenerateMultiArgs) -> Result<()> {
    if let Some(steps) = args.steps {
        config.sampler.steps = steps;
    }
    if args.no_sama {
        config.sama.enabled = false;
    }
    if args.no_guidance {
        config.guidance.enabled = false;
    }
    config.validate()?;
    let seed = args.seed.unwrap_or(config.seeds.sample);

    let (mut den, mut registry, encoder) = fresh_stack(&config);
    let ckpt = FusedCheckpoint::<Real>::load(&args.checkpoint)?;
    ckpt.apply(&mut den, &mut registry)?;

    let mut options = MultiOptions::from_config(&config)?;
    options.collect_dumps = args.dump_masks;
    let out = generate_multi(&den, &registry, &encoder, &args.prompt, seed, &options)?;

    let dir = prepare_out_dir(&config, args.out.as_deref(), "generate-multi")?;
    let image_path = dir.join("image.png");
    save_image_png(&out.image, &image_path)?;

    let mut log = String::new();
    log.push_str(&format!("reference_branches\t{}\n", out.diagnostics.reference_count));
    if let Some(iou) = out.diagnostics.final_anchor_iou {
        log.push_str(&format!("final_anchor_iou\t{iou:.6}\n"));
    }
    if let Some(notice) = &out.diagnostics.notice {
        log.push_str(&format!("notice\t{notice}\n"));
    }
    log.push('\n');
    log.push_str(&out.diagnostics.to_table());
    fs::write(dir.join("layout_log.txt"), log)?;

    for (k, map) in out.anchor_maps.iter().enumerate() {
        save_image_png(&map_to_image(map), &dir.join(format!("anchor_{k}.png")))?;
    }
    for (k, map) in out.final_maps.iter().enumerate() {
        save_image_png(&map_to_image(map), &dir.join(format!("final_map_{k}.png")))?;
    }
    if args.dump_masks {
        let mask_dir = dir.join("masks");
        fs::create_dir_all(&mask_dir)?;
        let mut stats = String::from("step\tv_w_norm\n");
        for dump in &out.dumps {
            for (k, mask) in dump.masks.iter().enumerate() {
                save_image_png(
                    &map_to_image(mask),
                    &mask_dir.join(format!("step_{:03}_concept_{k}.png", dump.step)),
                )?;
            }
            if let Some(norm) = dump.v_w_norm {
                stats.push_str(&format!("{}\t{norm:.6}\n", dump.step));
            }
        }
        fs::write(mask_dir.join("value_norms.txt"), stats)?;
    }

    let mut manifest = RunManifest::new("generate-multi", &config);
    manifest.record_input("checkpoint", &args.checkpoint)?;
    manifest.note("prompt", &args.prompt);
    manifest.note("seed", seed);
    if let Some(iou) = out.diagnostics.final_anchor_iou {
        manifest.note("final_anchor_iou", format!("{iou:.6}"));
    }
    manifest.save(&dir.join("manifest.json"))?;
    info!(
        "wrote {} ({} reference branches)",
        image_path.display(),
        out.diagnostics.reference_count
    );
    Ok(())
}

fn cmd_eval(config: &RunConfig, args: &EvalArgs) -> Result<()> {
    let dataset_dir = args
        .dataset
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.paths.dataset_dir));
    let dataset = SynthConceptDataset::<Real>::load(&dataset_dir)?;
    let image = showflow::testbed::load_image_png::<Real>(&args.image)?;

    let wanted: Option<Vec<String>> = args
        .concepts
        .as_ref()
        .map(|s| s.split(',').map(|c| c.trim().to_string()).collect());
    let mut names: Vec<String> = Vec::new();
    for item in &dataset.items {
        if !names.contains(&item.concept) {
            names.push(item.concept.clone());
        }
    }
    if let Some(wanted) = &wanted {
        names.retain(|n| wanted.contains(n));
        for w in wanted {
            if !names.contains(w) {
                return Err(showflow::Error::data(format!(
                    "concept '{w}' not present in dataset {}",
                    dataset_dir.display()
                ))
                .into());
            }
        }
    }
    let references: Vec<(String, Vec<showflow::Mat<Real>>)> = names
        .iter()
        .map(|name| {
            (
                name.clone(),
                dataset.for_concept(name).iter().map(|it| it.image.clone()).collect(),
            )
        })
        .collect();

    let backend = make_backend::<Real>(&args.backend, config.seeds.model)?;
    let report = evaluate_image(backend.as_ref(), &image, &references, &args.prompt)?;
    let table = report.to_table();
    print!("{table}");

    let dir = prepare_out_dir(config, args.out.as_deref(), "eval")?;
    fs::write(dir.join("report.txt"), &table)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;

    let mut manifest = RunManifest::new("eval", config);
    manifest.record_input("image", &args.image)?;
    manifest.record_input("dataset", &dataset_dir.join("index.txt"))?;
    manifest.note("prompt", &args.prompt);
    manifest.note("f1", format!("{:.6}", report.f1));
    manifest.save(&dir.join("manifest.json"))?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
