//! Search and evaluation runs that read a config and write under an output
//! directory.

use std::path::Path;
use std::time::Instant;

use msgdas_core::engine::{evaluate_genotype, run_search, Clock, EpochMetrics, EvalReport, SearchState};
use msgdas_core::searchspace::Genotype;

use crate::cifar::load_cifar10_binary;
use crate::config::{DatasetKind, SearchConfig};
use crate::data::{gen_synthetic, search_data, Dataset};
use crate::error::{io_err, HarnessError, Result};
use crate::persist::{
    claim_outputs, truncate_metrics, write_genotype, Checkpoint, MetricsWriter, CHECKPOINT_FILE, CONFIG_FILE,
    GENOTYPE_FILE, METRICS_FILE,
};

pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub fn load_dataset(cfg: &SearchConfig) -> Result<Dataset> {
    match cfg.data.dataset {
        DatasetKind::Synthetic => {
            let s = &cfg.data.synthetic;
            gen_synthetic(s.n, s.classes, s.hw, cfg.search.seed)
        }
        DatasetKind::Cifar10 => {
            let c = &cfg.data.cifar10;
            let dir = c.dir.as_ref().ok_or_else(|| {
                HarnessError::Config("the cifar10 dataset needs data.cifar10.dir (or --cifar-dir)".into())
            })?;
            load_cifar10_binary(dir, c.subset_per_class, c.downsample_to)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OutputMode {
    /// Fail if any artifact already exists.
    #[default]
    Fresh,
    /// Replace existing artifacts.
    Force,
    /// Continue from the checkpoint in the directory.
    Resume,
}

/// Runs (or resumes) a search and writes `config.toml`, `metrics.csv`,
/// `checkpoint.bin` (after every epoch) and `genotype.json` under `out`.
/// `progress` sees each epoch's metrics.
pub fn search_to_dir(
    cfg: &SearchConfig,
    out: &Path,
    mode: OutputMode,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<Genotype> {
    cfg.validate()?;
    let artifacts = [GENOTYPE_FILE, METRICS_FILE, CHECKPOINT_FILE, CONFIG_FILE];
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let dataset = load_dataset(cfg)?;
    let data = search_data(&dataset, cfg.search.seed)?;
    let spec = cfg.network.spec_for(&dataset);
    let steps = data.steps_per_epoch(cfg.search.batch_size);

    let (mut state, mut metrics) = match mode {
        OutputMode::Resume => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let mut stored = ckpt.config.clone();
            stored.out = cfg.out.clone();
            if stored != *cfg {
                return Err(HarnessError::Config(format!(
                    "{} was written with a different configuration; resume needs the same settings",
                    ckpt_path.display()
                )));
            }
            if out.join(GENOTYPE_FILE).exists() {
                std::fs::remove_file(out.join(GENOTYPE_FILE)).map_err(io_err(out.join(GENOTYPE_FILE)))?;
            }
            truncate_metrics(&metrics_path, ckpt.state.epoch)?;
            (ckpt.state, MetricsWriter::append(&metrics_path)?)
        }
        OutputMode::Fresh | OutputMode::Force => {
            claim_outputs(out, &artifacts, mode == OutputMode::Force)?;
            let state = SearchState::<f32>::new(spec, cfg.search.clone(), steps)?;
            (state, MetricsWriter::create(&metrics_path)?)
        }
    };
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()?).map_err(io_err(&config_path))?;

    let clock = WallClock::start();
    let mut failure: Option<HarnessError> = None;
    let result = run_search(&mut state, &data, &clock, |m, s| {
        let res = metrics.write(m).and_then(|_| {
            Checkpoint {
                config: cfg.clone(),
                state: s.clone(),
            }
            .save(&ckpt_path)
        });
        match res {
            Ok(()) => {
                progress(m);
                Ok(())
            }
            Err(e) => {
                let msg = e.to_string();
                failure = Some(e);
                Err(msgdas_core::Error::Input(msg))
            }
        }
    });
    let genotype = match (result, failure) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };
    write_genotype(&out.join(GENOTYPE_FILE), &genotype)?;
    Ok(genotype)
}

/// Trains `genotype` from scratch on the training half of the configured
/// data and reports validation accuracy.
pub fn evaluate(cfg: &SearchConfig, genotype: &Genotype) -> Result<EvalReport> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    let data = search_data(&dataset, cfg.search.seed)?;
    Ok(evaluate_genotype(cfg.network.spec_for(&dataset), genotype, &data, &cfg.eval)?)
}
