//! Experiment runner: single runs, grid sweeps over (divergence, alpha, p*),
//! seed statistics, and report emission.

use std::collections::BTreeMap;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, PStarMode};
use crate::corpus::{build_corpus, import_corpus, CorpusBundle};
use crate::decode::translate_bleu;
use crate::error::{Error, Result};
use crate::objectives::DivergenceKind;
use crate::pipeline::{finetune_st, model_from_checkpoint, pretrain_asr, pretrain_mt, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PStarSpec {
    Fixed(f64),
    Dynamic,
}

impl PStarSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "dynamic" || s == "dyn" {
            return Ok(PStarSpec::Dynamic);
        }
        let v: f64 = s
            .parse()
            .map_err(|e| Error::Config(format!("bad p* spec '{s}': {e}")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("p* {v} not in [0, 1]")));
        }
        Ok(PStarSpec::Fixed(v))
    }

    pub fn label(&self) -> String {
        match self {
            PStarSpec::Fixed(v) => format!("{v}"),
            PStarSpec::Dynamic => "dynamic".to_string(),
        }
    }
}

/// One grid cell: a full fine-tuning configuration delta.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub divergence: DivergenceKind,
    pub alpha: f64,
    pub p_star: PStarSpec,
    pub single_branch: bool,
}

impl CellSpec {
    pub fn new(divergence: DivergenceKind, alpha: f64, p_star: PStarSpec) -> Self {
        CellSpec {
            divergence,
            alpha,
            p_star,
            single_branch: false,
        }
    }

    pub fn baseline() -> Self {
        CellSpec {
            divergence: DivergenceKind::None,
            alpha: 0.0,
            p_star: PStarSpec::Fixed(0.0),
            single_branch: true,
        }
    }

    pub fn id(&self) -> String {
        let p = match self.p_star {
            PStarSpec::Fixed(v) => format!("p{v}"),
            PStarSpec::Dynamic => "pdyn".to_string(),
        };
        let base = format!("{}_a{}_{}", self.divergence.name(), self.alpha, p);
        if self.single_branch {
            format!("baseline_{base}")
        } else {
            base
        }
    }

    /// Resolves this cell against a base configuration.
    pub fn apply(&self, base: &Config, seed: u64) -> Config {
        let mut cfg = base.clone();
        cfg.divergence = self.divergence;
        cfg.alpha = self.alpha;
        cfg.single_branch = self.single_branch;
        cfg.seed = seed;
        match self.p_star {
            PStarSpec::Fixed(v) => {
                cfg.p_star_mode = PStarMode::Fixed;
                cfg.p_star = v;
            }
            PStarSpec::Dynamic => {
                cfg.p_star_mode = PStarMode::Dynamic;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub cells: Vec<CellSpec>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn product(
        divergences: &[DivergenceKind],
        alphas: &[f64],
        p_stars: &[PStarSpec],
        seeds: &[u64],
    ) -> Self {
        let mut cells = Vec::new();
        for &d in divergences {
            for &a in alphas {
                for &p in p_stars {
                    cells.push(CellSpec::new(d, a, p));
                }
            }
        }
        SweepSpec {
            cells,
            seeds: seeds.to_vec(),
        }
    }

    /// Named grids for the comparative experiments.
    pub fn preset(name: &str, seeds: &[u64]) -> Result<SweepSpec> {
        let cells = match name {
            // Consistency-loss comparison at fixed p* = 0.2.
            "table2" => vec![
                CellSpec::new(DivergenceKind::None, 0.0, PStarSpec::Fixed(0.2)),
                CellSpec::new(DivergenceKind::Jsd, 1.0, PStarSpec::Fixed(0.2)),
                CellSpec::new(DivergenceKind::KlOrigToAux, 1.0, PStarSpec::Fixed(0.2)),
                CellSpec::new(DivergenceKind::KlAuxToOrig, 1.0, PStarSpec::Fixed(0.2)),
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Fixed(0.2)),
            ],
            // Replacement-probability curve at alpha = 1.
            "pstar" => vec![
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Fixed(0.0)),
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Fixed(0.2)),
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Fixed(0.6)),
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Fixed(1.0)),
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Dynamic),
            ],
            // Regularization strength vs modality adaption.
            "alpha" => vec![
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Fixed(0.0)),
                CellSpec::new(DivergenceKind::BiKl, 1.0, PStarSpec::Dynamic),
                CellSpec::new(DivergenceKind::BiKl, 5.0, PStarSpec::Fixed(0.0)),
                CellSpec::new(DivergenceKind::BiKl, 5.0, PStarSpec::Dynamic),
            ],
            // Single-branch CTC baseline.
            "baseline" => vec![CellSpec::baseline()],
            other => return Err(Error::Config(format!("unknown sweep preset '{other}'"))),
        };
        Ok(SweepSpec {
            cells,
            seeds: seeds.to_vec(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunRow {
    pub cell_id: String,
    pub divergence: String,
    pub alpha: f64,
    pub p_star: String,
    pub seed: u64,
    pub dev_bleu: f64,
    pub test_bleu: f64,
    pub epochs: u64,
}

/// Per-run rows plus per-cell seed statistics.
#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub rows: Vec<RunRow>,
    pub failures: Vec<(String, u64, String)>,
}

impl ResultTable {
    fn sorted_rows(&self) -> Vec<&RunRow> {
        let mut rows: Vec<&RunRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.cell_id.cmp(&b.cell_id).then(a.seed.cmp(&b.seed)));
        rows
    }

    pub fn results_tsv(&self) -> String {
        let mut s = String::from("cell_id\tdivergence\talpha\tp_star\tseed\tdev_bleu\ttest_bleu\tepochs\n");
        for r in self.sorted_rows() {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}\n",
                r.cell_id, r.divergence, r.alpha, r.p_star, r.seed, r.dev_bleu, r.test_bleu, r.epochs
            ));
        }
        for (cell, seed, why) in &self.failures {
            s.push_str(&format!("# FAILED {cell} seed {seed}: {why}\n"));
        }
        s
    }

    /// Mean/min/max over seeds per cell; the avg column is the mean of the
    /// dev and test means (presentation only).
    pub fn summary_tsv(&self) -> String {
        let mut by_cell: BTreeMap<String, Vec<&RunRow>> = BTreeMap::new();
        for r in &self.rows {
            by_cell.entry(r.cell_id.clone()).or_default().push(r);
        }
        let mut s = String::from(
            "cell_id\tseeds\tdev_mean\tdev_min\tdev_max\ttest_mean\ttest_min\ttest_max\tavg\tepochs_mean\n",
        );
        for (cell, rows) in by_cell {
            let stats = |f: &dyn Fn(&RunRow) -> f64| {
                let vals: Vec<f64> = rows.iter().map(|r| f(r)).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (mean, min, max)
            };
            let (dm, dlo, dhi) = stats(&|r: &RunRow| r.dev_bleu);
            let (tm, tlo, thi) = stats(&|r: &RunRow| r.test_bleu);
            let (em, _, _) = stats(&|r: &RunRow| r.epochs as f64);
            s.push_str(&format!(
                "{cell}\t{}\t{dm:.4}\t{dlo:.4}\t{dhi:.4}\t{tm:.4}\t{tlo:.4}\t{thi:.4}\t{:.4}\t{em:.2}\n",
                rows.len(),
                0.5 * (dm + tm),
            ));
        }
        s
    }

    pub fn cell_mean_test_bleu(&self, cell_id: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.cell_id == cell_id)
            .map(|r| r.test_bleu)
            .collect();
        if vals.is_empty() {
            return None;
        }
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn cell_rows(&self, cell_id: &str) -> Vec<&RunRow> {
        self.sorted_rows()
            .into_iter()
            .filter(|r| r.cell_id == cell_id)
            .collect()
    }
}

pub struct ExperimentOutcome {
    pub record: RunRecord,
    pub dev_bleu: f64,
    pub test_bleu: f64,
    pub best: Checkpoint,
    pub averaged: Checkpoint,
}

/// Loads the corpus named by the config (import when `data_dir` is set,
/// regenerate otherwise).
pub fn corpus_for(cfg: &Config) -> Result<CorpusBundle> {
    if cfg.data_dir.is_empty() {
        build_corpus(&cfg.corpus_config(), cfg.seed)
    } else {
        import_corpus(Path::new(&cfg.data_dir), &cfg.corpus_config())
    }
}

/// Obtains pre-trained checkpoints for a run: explicit paths win, otherwise
/// both stages are trained now.
pub fn pretrained_for(cfg: &Config, corpus: &CorpusBundle) -> Result<(Checkpoint, Checkpoint)> {
    let asr = if cfg.asr_ckpt.is_empty() {
        pretrain_asr(corpus, cfg)?.best
    } else {
        Checkpoint::load(Path::new(&cfg.asr_ckpt))?
    };
    let mt = if cfg.mt_ckpt.is_empty() {
        pretrain_mt(corpus, cfg)?.best
    } else {
        Checkpoint::load(Path::new(&cfg.mt_ckpt))?
    };
    Ok((asr, mt))
}

/// One full fine-tuning run: fine-tune, average the best checkpoints, then
/// evaluate dev/test BLEU with the configured beam.
pub fn run_experiment(
    cfg: &Config,
    corpus: &CorpusBundle,
    asr: &Checkpoint,
    mt: &Checkpoint,
) -> Result<ExperimentOutcome> {
    let out = finetune_st(corpus, asr, mt, cfg)?;
    let eval_model = model_from_checkpoint(&out.averaged, cfg, corpus)?;
    let dev_bleu = translate_bleu(
        &eval_model,
        &corpus.st_dev,
        cfg.beam_size,
        cfg.max_decode_len,
        cfg.precision,
    )?;
    let test_bleu = translate_bleu(
        &eval_model,
        &corpus.st_test,
        cfg.beam_size,
        cfg.max_decode_len,
        cfg.precision,
    )?;
    Ok(ExperimentOutcome {
        record: out.record,
        dev_bleu,
        test_bleu,
        best: out.best,
        averaged: out.averaged,
    })
}

pub struct SweepOutputs {
    pub table: ResultTable,
    /// (cell id, seed, record) for every completed run.
    pub records: Vec<(String, u64, RunRecord)>,
}

/// Runs every (cell, seed) combination. Pre-training is done once per seed
/// and shared across that seed's cells; cells are independent given the
/// checkpoints, so `jobs > 1` runs them on worker threads.
pub fn run_sweep(base: &Config, spec: &SweepSpec, jobs: usize) -> Result<SweepOutputs> {
    let mut prepared: Vec<(CellSpec, u64, Config, CorpusBundle, Checkpoint, Checkpoint)> = Vec::new();
    for &seed in &spec.seeds {
        let mut seed_cfg = base.clone();
        seed_cfg.seed = seed;
        let corpus = corpus_for(&seed_cfg)?;
        let (asr, mt) = pretrained_for(&seed_cfg, &corpus)?;
        for cell in &spec.cells {
            let cfg = cell.apply(base, seed);
            prepared.push((cell.clone(), seed, cfg, corpus.clone(), asr.clone(), mt.clone()));
        }
    }

    type RunOut = (CellSpec, u64, std::result::Result<(ExperimentOutcome, RunRecord), String>);
    let execute = |(cell, seed, cfg, corpus, asr, mt): &(CellSpec, u64, Config, CorpusBundle, Checkpoint, Checkpoint)| -> RunOut {
        let res = run_experiment(cfg, corpus, asr, mt)
            .map(|o| {
                let record = o.record.clone();
                (o, record)
            })
            .map_err(|e| e.to_string());
        (cell.clone(), *seed, res)
    };

    let outcomes: Vec<RunOut> = if jobs <= 1 {
        prepared.iter().map(execute).collect()
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in prepared.chunks(prepared.len().div_ceil(jobs)) {
                handles.push(scope.spawn(move || chunk.iter().map(execute).collect::<Vec<_>>()));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        })
    };

    let mut table = ResultTable::default();
    let mut records = Vec::new();
    for (cell, seed, res) in outcomes {
        match res {
            Ok((outcome, record)) => {
                table.rows.push(RunRow {
                    cell_id: cell.id(),
                    divergence: cell.divergence.name().to_string(),
                    alpha: cell.alpha,
                    p_star: cell.p_star.label(),
                    seed,
                    dev_bleu: outcome.dev_bleu,
                    test_bleu: outcome.test_bleu,
                    epochs: record.convergence_epoch(),
                });
                records.push((cell.id(), seed, record));
            }
            Err(why) => table.failures.push((cell.id(), seed, why)),
        }
    }
    records.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(SweepOutputs { table, records })
}

/// Fig-3-style curve data: one row per logged step.
pub fn curve_csv(record: &RunRecord) -> String {
    let mut s = String::from("step,ratio_aux_orig,upsilon\n");
    for r in &record.rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.ratio_aux_orig, r.upsilon));
    }
    s
}

/// Writes results.tsv, summary.tsv, per-run metrics/manifest files and curve
/// data. Re-emitting the same outputs is byte-identical.
pub fn emit_report(outputs: &SweepOutputs, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.tsv"), outputs.table.results_tsv())?;
    std::fs::write(out_dir.join("summary.tsv"), outputs.table.summary_tsv())?;
    let curves = out_dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    for (cell, seed, record) in &outputs.records {
        let run_dir = out_dir.join("runs").join(format!("{cell}_s{seed}"));
        record.write_files(&run_dir)?;
        std::fs::write(curves.join(format!("{cell}_s{seed}.csv")), curve_csv(record))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_ids_are_distinct_and_stable() {
        let spec = SweepSpec::preset("table2", &[1, 2, 3]).unwrap();
        let ids: Vec<String> = spec.cells.iter().map(CellSpec::id).collect();
        assert_eq!(ids.len(), 5);
        let unique: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), 5);
        assert!(ids.contains(&"bi_kl_a1_p0.2".to_string()));
        assert_eq!(CellSpec::baseline().id(), "baseline_none_a0_p0");
    }

    #[test]
    fn pstar_spec_parses() {
        assert_eq!(PStarSpec::parse("dynamic").unwrap(), PStarSpec::Dynamic);
        assert_eq!(PStarSpec::parse("0.6").unwrap(), PStarSpec::Fixed(0.6));
        assert!(PStarSpec::parse("1.2").is_err());
        assert!(PStarSpec::parse("x").is_err());
    }

    #[test]
    fn cell_apply_sets_mode() {
        let base = Config::default();
        let dyn_cfg = CellSpec::new(DivergenceKind::BiKl, 5.0, PStarSpec::Dynamic).apply(&base, 7);
        assert_eq!(dyn_cfg.p_star_mode, PStarMode::Dynamic);
        assert_eq!(dyn_cfg.alpha, 5.0);
        assert_eq!(dyn_cfg.seed, 7);
        let fixed = CellSpec::new(DivergenceKind::Jsd, 1.0, PStarSpec::Fixed(0.6)).apply(&base, 7);
        assert_eq!(fixed.p_star_mode, PStarMode::Fixed);
        assert_eq!(fixed.p_star, 0.6);
    }

    #[test]
    fn results_tsv_is_sorted_and_schema_stable() {
        let mut table = ResultTable::default();
        for (cell, seed) in [("b_cell", 2u64), ("a_cell", 1), ("b_cell", 1)] {
            table.rows.push(RunRow {
                cell_id: cell.into(),
                divergence: "bi_kl".into(),
                alpha: 1.0,
                p_star: "0.2".into(),
                seed,
                dev_bleu: 10.0,
                test_bleu: 12.0,
                epochs: 3,
            });
        }
        let tsv = table.results_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(
            lines[0],
            "cell_id\tdivergence\talpha\tp_star\tseed\tdev_bleu\ttest_bleu\tepochs"
        );
        assert!(lines[1].starts_with("a_cell\t"));
        assert!(lines[2].starts_with("b_cell\tbi_kl\t1\t0.2\t1"));
        // Re-emission is identical.
        assert_eq!(tsv, table.results_tsv());
    }

    #[test]
    fn summary_aggregates_seeds() {
        let mut table = ResultTable::default();
        for (seed, dev, test) in [(1u64, 10.0, 20.0), (2, 14.0, 24.0)] {
            table.rows.push(RunRow {
                cell_id: "c".into(),
                divergence: "jsd".into(),
                alpha: 1.0,
                p_star: "dynamic".into(),
                seed,
                dev_bleu: dev,
                test_bleu: test,
                epochs: 4,
            });
        }
        let s = table.summary_tsv();
        let line = s.lines().nth(1).unwrap();
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], "c");
        assert_eq!(cols[1], "2");
        assert_eq!(cols[2], "12.0000"); // dev mean
        assert_eq!(cols[5], "22.0000"); // test mean
        assert_eq!(cols[8], "17.0000"); // avg of means
    }
}
