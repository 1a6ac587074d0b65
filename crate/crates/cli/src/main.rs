use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use imgst_core::corpus::{
    attach_captions, build_dataset, write_dataset, CaptionStrategy, CaptionerOracle, DatasetConfig,
    DatasetSplit, Mode, Tier,
};
use imgst_core::decode::{decode, DecodeConfig, Strategy};
use imgst_core::harness::{
    parse_kv, pretrain_shared, protocol_bleu, write_text, ExperimentScale, ExperimentSpec, Lab, Manifest, RowResult,
    Scored, MAX_REFS,
};
use imgst_core::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use imgst_core::seed::mix;
use imgst_core::train::{encode_dataset, train, TargetSource};

#[derive(Parser)]
#[command(name = "imgst", version, about = "Speech translation distilled from an image captioner, on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the corpus and write it to the run directory.
    GenerateCorpus(Common),
    /// Pretrain the frozen decoder and encoder.
    PretrainLm(Common),
    /// Train the adapter on captions (or references with --supervised).
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint from pretrain-lm; pretrained in place when absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Start the adapter from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Train on the human references instead of captions.
        #[arg(long)]
        supervised: bool,
    },
    /// Decode the test split; --strategy names the decoding strategy here.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a hypothesis file under the reference protocol.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hyps: PathBuf,
    },
    /// Caption-strategy by tier grid, or the caption-count sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "grid")]
        kind: SweepKind,
        /// Caption counts for the count sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        ks: Vec<usize>,
    },
    /// Results table for one oracle tier, optionally with both sweeps.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweeps: bool,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SweepKind {
    Grid,
    Captions,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// `key = value` file of dotted overrides, e.g. `train.epochs = 10`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the published training recipe instead of the reference one.
    #[arg(long)]
    published_recipe: bool,
    /// Use the seconds-scale smoke configuration.
    #[arg(long, conflicts_with = "published_recipe")]
    smoke: bool,
    /// translation or paraphrase; overrides the config file.
    #[arg(long)]
    mode: Option<String>,
    /// A, B or C; also resets the confusion rate to the tier default unless
    /// the config file sets `corpus.oracle.p_confuse`.
    #[arg(long)]
    oracle_tier: Option<String>,
    /// Caption strategy, or decoding strategy for `decode`.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    k_captions: Option<usize>,
    /// Reference count to evaluate at; every count when absent.
    #[arg(long)]
    n_refs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

struct Setup {
    scale: ExperimentScale,
    mode: Mode,
    tier: Tier,
    seed: u64,
    out: PathBuf,
    manifest: Manifest,
}

impl Common {
    fn setup(&self, command: &str) -> Result<Setup> {
        let mut scale = if self.published_recipe {
            ExperimentScale::published_recipe()
        } else if self.smoke {
            ExperimentScale::smoke()
        } else {
            ExperimentScale::reference()
        };
        let overrides = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                parse_kv(&text)?
            }
            None => BTreeMap::new(),
        };
        scale.apply(&overrides)?;
        if let Some(m) = &self.mode {
            scale.corpus.mode = Mode::parse(m).ok_or_else(|| anyhow!("unknown mode {m}"))?;
        }
        if let Some(t) = &self.oracle_tier {
            let tier = Tier::parse(t).ok_or_else(|| anyhow!("unknown oracle tier {t}"))?;
            let mut oracle = CaptionerOracle::new(tier, scale.corpus.oracle.strategy);
            if overrides.contains_key("corpus.oracle.p_confuse") {
                oracle = oracle.with_p_confuse(scale.corpus.oracle.p_confuse);
            }
            scale.corpus.oracle = oracle;
        }
        if let Some(k) = self.k_captions {
            scale.corpus.k_captions = k;
        }
        let (mode, tier) = (scale.corpus.mode, scale.corpus.oracle.tier);
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let mut manifest = Manifest::new(command);
        manifest.versions.insert("imgst-cli".into(), env!("CARGO_PKG_VERSION").into());
        manifest.seeds.insert("master".into(), self.seed);
        manifest.seeds.insert("corpus".into(), scale.corpus.seed);
        Ok(Setup {
            scale,
            mode,
            tier,
            seed: self.seed,
            out: self.out.clone(),
            manifest,
        })
    }

    fn caption_strategy(&self, scale: &ExperimentScale) -> Result<CaptionStrategy> {
        match &self.strategy {
            None => Ok(scale.corpus.oracle.strategy),
            Some(s) => CaptionStrategy::parse(s).ok_or_else(|| anyhow!("unknown caption strategy {s}")),
        }
    }
}

impl Setup {
    fn oracle(&self, strategy: CaptionStrategy) -> CaptionerOracle {
        CaptionerOracle {
            strategy,
            ..self.scale.corpus.oracle
        }
    }

    fn dataset(&self, mode: Mode) -> Result<DatasetSplit> {
        Ok(build_dataset(&DatasetConfig {
            mode,
            ..self.scale.corpus.clone()
        })?)
    }

    fn captioned(&self, strategy: CaptionStrategy) -> Result<DatasetSplit> {
        let base = self.dataset(self.mode)?;
        Ok(attach_captions(&base, self.oracle(strategy), self.scale.corpus.k_captions)?)
    }

    fn finish(mut self, outputs: &[&str]) -> Result<()> {
        let kv = self.scale.to_kv();
        write_text(&self.out, "config.kv", &kv)?;
        self.manifest.config.extend(parse_kv(&kv)?);
        self.manifest.outputs = std::iter::once("config.kv").chain(outputs.iter().copied()).map(String::from).collect();
        self.manifest.write(&self.out)?;
        println!("wrote {}", self.out.display());
        Ok(())
    }

    fn lab(&self) -> Result<Lab> {
        let started = Instant::now();
        eprintln!("pretraining shared model");
        let lab = Lab::new(self.scale.clone(), self.seed)?
            .with_progress(move |m| eprintln!("[{:>6.0}s] {m}", started.elapsed().as_secs_f64()));
        Ok(lab)
    }
}

fn generate_corpus(common: &Common) -> Result<()> {
    let setup = common.setup("generate-corpus")?;
    let strategy = common.caption_strategy(&setup.scale)?;
    let data = setup.captioned(strategy)?;
    write_dataset(&data, &setup.out.join("corpus"))?;
    setup.finish(&["corpus"])
}

fn pretrain(setup: &Setup) -> Result<(Checkpoint, String)> {
    let translation = setup.dataset(Mode::Translation)?;
    let paraphrase = setup.dataset(Mode::Paraphrase)?;
    let (model, report) = pretrain_shared(&setup.scale, setup.seed, &translation, &paraphrase)?;
    let checkpoint = Checkpoint::of(
        &model,
        CheckpointMeta {
            seed: setup.seed,
            ..CheckpointMeta::default()
        },
    );
    let text = format!(
        "lm_dev_ppl_before = {}\nlm_dev_ppl_after = {}\nlm_epochs = {}\nenc_loss_before = {}\nenc_loss_after = {}\n",
        report.lm_dev_ppl_before, report.lm_dev_ppl_after, report.lm_epochs, report.enc_loss_before, report.enc_loss_after
    );
    Ok((checkpoint, text))
}

fn pretrain_lm(common: &Common) -> Result<()> {
    let setup = common.setup("pretrain-lm")?;
    let (checkpoint, report) = pretrain(&setup)?;
    save_checkpoint(&setup.out.join("pretrained.ckpt"), &checkpoint)?;
    write_text(&setup.out, "pretrain_report.kv", &report)?;
    print!("{report}");
    setup.finish(&["pretrained.ckpt", "pretrain_report.kv"])
}

fn hyps_text(data: &DatasetSplit, outputs: &[Scored]) -> String {
    outputs
        .iter()
        .map(|s| {
            let own = s.own_reference.map_or("-".to_string(), |o| o.to_string());
            format!("{}\t{own}\t{}\n", s.item, data.world.vocab.detokenize(&s.tokens))
        })
        .collect()
}

fn parse_hyps(data: &DatasetSplit, text: &str) -> Result<Vec<Scored>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let mut parts = line.splitn(3, '\t');
            let (item, own, words) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => bail!("line {}: expected item<TAB>own<TAB>text", i + 1),
            };
            let item: usize = item.parse().with_context(|| format!("line {}: item", i + 1))?;
            if item >= data.test.len() {
                bail!("line {}: item {item} outside the test split", i + 1);
            }
            let own_reference = match own {
                "-" => None,
                o => Some(o.parse().with_context(|| format!("line {}: own reference", i + 1))?),
            };
            Ok(Scored {
                item,
                own_reference,
                tokens: data.world.vocab.tokenize(words)?,
            })
        })
        .collect()
}

fn train_cmd(common: &Common, pretrained: Option<&Path>, init: Option<&Path>, supervised: bool) -> Result<()> {
    let mut setup = common.setup("train")?;
    let strategy = common.caption_strategy(&setup.scale)?;
    let data = setup.captioned(strategy)?;
    let model = match pretrained {
        Some(p) => load_checkpoint(p)?.to_model()?,
        None => {
            eprintln!("no --pretrained checkpoint; pretraining in place");
            pretrain(&setup)?.0.to_model()?
        }
    };
    let mut config = setup.scale.train.clone();
    config.mode = setup.mode;
    config.seed = setup.seed;
    config.targets = if supervised {
        TargetSource::References
    } else {
        TargetSource::Captions
    };
    config.init_checkpoint = init.map(Path::to_path_buf);
    let encoded = encode_dataset(&model, &data)?;
    let started = Instant::now();
    let outcome = train(model, &data, Some(&encoded), &config)?;
    let outputs = imgst_core::harness::model_outputs(&outcome.model, &data.test, &encoded.test, config.max_decode_len)?;
    save_checkpoint(&setup.out.join("best.ckpt"), &outcome.checkpoint)?;
    write_text(&setup.out, "train_log.txt", &outcome.log.to_string())?;
    write_text(&setup.out, "test_hyps.tsv", &hyps_text(&data, &outputs))?;
    println!(
        "best epoch {} dev {:.2} ({:.0}s)",
        outcome.log.best_epoch,
        outcome.log.best_metric(),
        started.elapsed().as_secs_f64()
    );
    setup.manifest.config.insert("targets".into(), format!("{:?}", config.targets));
    setup.finish(&["best.ckpt", "train_log.txt", "test_hyps.tsv"])
}

fn decode_cmd(common: &Common, checkpoint: &Path) -> Result<()> {
    let setup = common.setup("decode")?;
    let name = common.strategy.as_deref().unwrap_or("greedy");
    let strategy = Strategy::parse(name).ok_or_else(|| anyhow!("unknown decoding strategy {name}"))?;
    let data = setup.dataset(setup.mode)?;
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let encoded = encode_dataset(&model, &data)?;
    let mut outputs = Vec::new();
    for (j, item) in data.test.iter().enumerate() {
        for (u, utt) in item.utterances.iter().enumerate() {
            let config = DecodeConfig {
                strategy,
                max_len: setup.scale.train.max_decode_len,
                seed: mix(setup.seed, j as u64, u as u64),
                ..DecodeConfig::default()
            };
            let lm = model.conditioned(&encoded.test.utterances[j][u]);
            let best = decode(&lm, &config)?
                .into_iter()
                .next()
                .ok_or_else(|| anyhow!("decoder returned nothing"))?;
            outputs.push(Scored {
                item: j,
                own_reference: Some(utt.own_reference),
                tokens: best.content(imgst_core::corpus::EOS).to_vec(),
            });
        }
    }
    write_text(&setup.out, "hyps.tsv", &hyps_text(&data, &outputs))?;
    setup.finish(&["hyps.tsv"])
}

fn evaluate_cmd(common: &Common, hyps: &Path) -> Result<()> {
    let setup = common.setup("evaluate")?;
    let data = setup.dataset(setup.mode)?;
    let text = std::fs::read_to_string(hyps).with_context(|| format!("reading {}", hyps.display()))?;
    let outputs = parse_hyps(&data, &text)?;
    let wanted: Vec<usize> = match common.n_refs {
        Some(n) if (1..=MAX_REFS).contains(&n) => vec![n],
        Some(n) => bail!("--n-refs must be in 1..={MAX_REFS}, got {n}"),
        None => (1..=MAX_REFS).collect(),
    };
    let row = RowResult::collect("hyps", setup.seed, |n, seed| {
        if !wanted.contains(&n) {
            return Ok(None);
        }
        protocol_bleu(&data.test, &outputs, n, true, seed).map(Some)
    })?;
    let mut report = String::new();
    for n in &wanted {
        let c = row.cell(*n).expect("collected");
        report.push_str(&format!("n={n}\t{:.2}±{:.2}\n", c.mean, c.two_sigma));
    }
    print!("{report}");
    write_text(&setup.out, "scores.tsv", &report)?;
    setup.finish(&["scores.tsv"])
}

fn sweep_cmd(common: &Common, kind: SweepKind, ks: &[usize]) -> Result<()> {
    let setup = common.setup("sweep")?;
    let mut lab = setup.lab()?;
    match kind {
        SweepKind::Grid => {
            let grid = lab.sensitivity_sweep()?;
            print!("{}", grid.to_plot_data());
            write_text(&setup.out, "sweep_grid.tsv", &grid.to_plot_data())?;
            setup.finish(&["sweep_grid.tsv"])
        }
        SweepKind::Captions => {
            let strategy = common.caption_strategy(&setup.scale)?;
            let sweep = lab.caption_count_sweep(setup.tier, strategy, ks)?;
            print!("{}", sweep.to_plot_data());
            write_text(&setup.out, "sweep_captions.tsv", &sweep.to_plot_data())?;
            setup.finish(&["sweep_captions.tsv"])
        }
    }
}

fn report_cmd(common: &Common, sweeps: bool) -> Result<()> {
    let setup = common.setup("report")?;
    let mut lab = setup.lab()?;
    let table = lab.table(&ExperimentSpec::table_rows(setup.tier))?;
    println!("{}", table.pretty());
    write_text(&setup.out, "table.tsv", &table.to_string())?;
    write_text(&setup.out, "table.txt", &table.pretty())?;
    let mut outputs = vec!["table.tsv", "table.txt"];
    if sweeps {
        let grid = lab.sensitivity_sweep()?;
        write_text(&setup.out, "sweep_grid.tsv", &grid.to_plot_data())?;
        let strategy = common.caption_strategy(&setup.scale)?;
        let ks: Vec<usize> = (1..=10).collect();
        let counts = lab.caption_count_sweep(setup.tier, strategy, &ks)?;
        write_text(&setup.out, "sweep_captions.tsv", &counts.to_plot_data())?;
        outputs.extend(["sweep_grid.tsv", "sweep_captions.tsv"]);
    }
    let runs: BTreeMap<String, String> = lab
        .runs()
        .map(|r| (r.name.clone(), format!("best_epoch={} dev={:.2}", r.log.best_epoch, r.log.best_metric())))
        .collect();
    let runs_text: String = runs.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    write_text(&setup.out, "runs.tsv", &runs_text)?;
    outputs.push("runs.tsv");
    setup.finish(&outputs)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateCorpus(c) => generate_corpus(&c),
        Command::PretrainLm(c) => pretrain_lm(&c),
        Command::Train {
            common,
            pretrained,
            init,
            supervised,
        } => train_cmd(&common, pretrained.as_deref(), init.as_deref(), supervised),
        Command::Decode { common, checkpoint } => decode_cmd(&common, &checkpoint),
        Command::Evaluate { common, hyps } => evaluate_cmd(&common, &hyps),
        Command::Sweep { common, kind, ks } => sweep_cmd(&common, kind, &ks),
        Command::Report { common, sweeps } => report_cmd(&common, sweeps),
    }
}
