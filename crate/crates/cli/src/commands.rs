//! The pipeline commands. Each validates its whole configuration and
//! inputs before it creates or writes anything in the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sarnas_core::bilevel::{run_search, write_search_csv};
use sarnas_core::checkpoint::{self, MAGIC as CKPT_MAGIC};
use sarnas_core::data::{save_dir, synth_clips, Dataset};
use sarnas_core::genotype::{derive_genotype, genotype_dot, parse_genotype, serialize_genotype, Genotype, GENOTYPE_MAGIC};
use sarnas_core::gradcheck::{self, CheckReport};
use sarnas_core::network::{discrete_param_count, supernet_param_count, DiscreteNet};
use sarnas_core::rng::derive_seed;
use sarnas_core::supernet::{relaxed_dot, AlphaParams, CellType};
use sarnas_core::train::{evaluate_network, train_network, write_train_csv};
use sarnas_core::{Error, Result};

use crate::config::{RunConfig, RESOLVED_FILE};

pub const SEARCH_METRICS: &str = "search_metrics.csv";
pub const TRAIN_METRICS: &str = "train_metrics.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_CSV_HEADER: &str = "samples,loss,top1,top5";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const GENOTYPE_FILE: &str = "genotype.txt";
pub const ALPHA_CKPT: &str = "alpha.ckpt";
pub const ALPHA_BEST_CKPT: &str = "alpha_best.ckpt";
pub const SUPERNET_CKPT: &str = "supernet.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

/// Seed of the split of the search data into architecture-train and
/// validation halves.
const SPLIT_STREAM: u64 = 7;

fn say(log: &mut dyn Write, line: impl AsRef<str>) {
    let _ = writeln!(log, "{}", line.as_ref());
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Creates the output directory and echoes the resolved configuration.
fn open_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(RESOLVED_FILE), cfg.to_text())?;
    Ok(dir)
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Dataset> {
    let data = Dataset::load_dir(dir, cfg.frames, cfg.layout, cfg.center)?;
    if data.classes != cfg.classes {
        return Err(Error::Config(format!(
            "{} holds {} classes but classes = {}",
            dir.display(),
            data.classes,
            cfg.classes
        )));
    }
    Ok(data)
}

pub fn load_genotype(path: &Path) -> Result<Genotype> {
    parse_genotype(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_alpha(path: &Path) -> Result<AlphaParams<f32>> {
    let mut alpha = AlphaParams::<f32>::init(0, 0.0)?;
    checkpoint::load_store(alpha.store_mut(), path)?;
    Ok(alpha)
}

/// Writes `per_class` synthetic clips of every class plus a manifest.
pub fn synth(cfg: &RunConfig, log: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let sc = cfg.synth_config();
    sc.validate()?;
    let clips = synth_clips(&sc)?;
    let dir = open_out_dir(cfg)?;
    save_dir(&dir, &clips)?;
    say(log, format!("wrote {} clips of {} classes to {}", clips.len(), sc.classes, dir.display()));
    Ok(())
}

pub struct SearchReport {
    pub genotype: Genotype,
    pub entropy_initial: [f64; 2],
    pub entropy_final: [f64; 2],
}

/// Bilevel search on a 50/50 split of the data directory.
pub fn search(cfg: &RunConfig, log: &mut dyn Write) -> Result<SearchReport> {
    cfg.validate()?;
    let data = load_data(cfg, &cfg.data_dir)?;
    let sc = cfg.search_config(data.classes);
    sc.validate()?;
    let (train, val) = data.split(0.5, derive_seed(cfg.seed, SPLIT_STREAM, 0))?;
    let dir = open_out_dir(cfg)?;
    say(
        log,
        format!(
            "search: {} architecture-train / {} validation samples, {} parameters",
            train.len(),
            val.len(),
            supernet_param_count(&sc.net)?
        ),
    );
    let out = run_search(&sc, &train, &val, |m| say(log, m.csv_row()))?;
    write_search_csv(&dir.join(SEARCH_METRICS), &out.metrics)?;
    let alpha = out.final_alpha();
    checkpoint::save_store(alpha.store(), &dir.join(ALPHA_CKPT))?;
    checkpoint::save_store(out.best.store(), &dir.join(ALPHA_BEST_CKPT))?;
    checkpoint::save_store(&out.weights, &dir.join(SUPERNET_CKPT))?;
    let genotype = derive_genotype(alpha);
    write(&dir.join(GENOTYPE_FILE), serialize_genotype(&genotype))?;
    let entropy = |a: &AlphaParams<f32>| [a.mean_edge_entropy(CellType::Normal), a.mean_edge_entropy(CellType::Reduce)];
    let report = SearchReport {
        genotype,
        entropy_initial: entropy(&out.history[0]),
        entropy_final: entropy(alpha),
    };
    say(log, format!("{genotype}"));
    Ok(report)
}

pub struct TrainReport {
    pub params: usize,
    pub best_epoch: usize,
    pub final_train_top1: f64,
    pub stall_warning: Option<String>,
}

/// Trains the discrete network of the genotype at `genotype_path`.
pub fn train(cfg: &RunConfig, genotype_path: &Path, log: &mut dyn Write) -> Result<TrainReport> {
    cfg.validate()?;
    let genotype = load_genotype(genotype_path)?;
    let data = load_data(cfg, &cfg.data_dir)?;
    let val = cfg.val_dir.as_deref().map(|d| load_data(cfg, d)).transpose()?;
    let tc = cfg.train_config(data.classes);
    tc.validate()?;
    let params = discrete_param_count(&genotype, &tc.net)?;
    let dir = open_out_dir(cfg)?;
    write(&dir.join(GENOTYPE_FILE), serialize_genotype(&genotype))?;
    say(log, format!("train: {} samples, {params} parameters", data.len()));
    let out = train_network(&tc, &genotype, &data, val.as_ref(), |m| say(log, m.csv_row()))?;
    write_train_csv(&dir.join(TRAIN_METRICS), &out.metrics)?;
    checkpoint::save_store(&out.best, &dir.join(BEST_CKPT))?;
    checkpoint::save_store(&out.weights, &dir.join(LAST_CKPT))?;
    let report = TrainReport {
        params,
        best_epoch: out.best_epoch,
        final_train_top1: out.metrics.last().map_or(f64::NAN, |m| m.train_top1),
        stall_warning: out.stall_warning(),
    };
    say(
        log,
        format!(
            "summary: parameters {params}, best epoch {}, train loss {:.6} -> {:.6}",
            report.best_epoch, out.loss_before, out.loss_after
        ),
    );
    if let Some(w) = &report.stall_warning {
        say(log, format!("warning: {w}"));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        format!("{EVAL_CSV_HEADER}\n{},{:.6},{:.6},{:.6}\n", self.samples, self.loss, self.top1, self.top5)
    }
}

/// Evaluates a trained (or, without a checkpoint, freshly initialized)
/// network on the data directory.
pub fn eval(cfg: &RunConfig, genotype_path: &Path, ckpt: Option<&Path>, log: &mut dyn Write) -> Result<EvalReport> {
    cfg.validate()?;
    let genotype = load_genotype(genotype_path)?;
    let data = load_data(cfg, &cfg.data_dir)?;
    let tc = cfg.train_config(data.classes);
    tc.validate()?;
    let (net, mut weights) = DiscreteNet::build::<f32>(&genotype, tc.net, derive_seed(cfg.seed, 5, 0))?;
    if let Some(path) = ckpt {
        checkpoint::load_store(&mut weights, path)?;
    }
    let dir = open_out_dir(cfg)?;
    let t = evaluate_network(&net, &weights, &data, cfg.batch_size)?;
    let report = EvalReport {
        samples: t.count,
        loss: t.mean_loss(),
        top1: t.top1_rate(),
        top5: t.top5_rate(),
    };
    write(&dir.join(EVAL_CSV), report.csv())?;
    say(log, format!("top1 {:.6} top5 {:.6} over {} samples", report.top1, report.top5, report.samples));
    Ok(report)
}

/// Writes `normal.dot` and `reduce.dot` for a genotype file or a relaxed
/// architecture checkpoint.
pub fn export_dot(cfg: &RunConfig, input: &Path, log: &mut dyn Write) -> Result<()> {
    cfg.validate()?;
    let bytes = fs::read(input).map_err(|e| Error::io(input, e))?;
    let graphs: Vec<(CellType, String)> = if bytes.starts_with(CKPT_MAGIC.as_bytes()) {
        let alpha = load_alpha(input)?;
        [CellType::Normal, CellType::Reduce]
            .into_iter()
            .map(|c| (c, relaxed_dot(&alpha, c)))
            .collect()
    } else if bytes.starts_with(GENOTYPE_MAGIC.as_bytes()) {
        let text = String::from_utf8(bytes).map_err(|_| Error::Input(format!("{} is not UTF-8", input.display())))?;
        let g = parse_genotype(&text)?;
        [CellType::Normal, CellType::Reduce]
            .into_iter()
            .map(|c| (c, genotype_dot(&g, c)))
            .collect()
    } else {
        return Err(Error::Input(format!(
            "{}: neither a genotype file nor an architecture checkpoint",
            input.display()
        )));
    };
    let dir = open_out_dir(cfg)?;
    for (cell, dot) in graphs {
        let path = dir.join(format!("{}.dot", cell.name()));
        write(&path, dot)?;
        say(log, format!("wrote {}", path.display()));
    }
    Ok(())
}

/// Runs the finite-difference suite; the reports are also written as CSV.
pub fn gradcheck(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<CheckReport>> {
    cfg.validate()?;
    let dir = open_out_dir(cfg)?;
    let reports = gradcheck::run_suite(cfg.seed)?;
    let mut csv = String::from("case,max_rel_error,tolerance,coordinates,passed\n");
    for r in &reports {
        csv.push_str(&format!("{},{:.3e},{:.0e},{},{}\n", r.name, r.max_rel_error, r.tolerance, r.coordinates, r.passed()));
        say(
            log,
            format!("{} {:<48} {:.3e}", if r.passed() { "ok  " } else { "FAIL" }, r.name, r.max_rel_error),
        );
    }
    write(&dir.join(GRADCHECK_CSV), csv)?;
    Ok(reports)
}
