//! Command-line entry points: data generation, the three training stages,
//! evaluation, sweeps, and the self-check suites.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use auxbranch::checkpoint::{average_checkpoints, Checkpoint};
use auxbranch::checks::{ctc_oracle_suite, grad_check_suite};
use auxbranch::config::Config;
use auxbranch::corpus::export_corpus;
use auxbranch::decode::{asr_token_error_rate, translate_bleu};
use auxbranch::error::{Error, Result};
use auxbranch::pipeline::{model_from_checkpoint, mt_dev_accuracy, pretrain_asr, pretrain_mt};
use auxbranch::sweep::{corpus_for, emit_report, pretrained_for, run_experiment, run_sweep, SweepSpec};

#[derive(Parser)]
#[command(name = "auxbranch", about = "Toy speech translation with an auxiliary-branch fine-tuning stage")]
struct Cli {
    /// Flat key=value config file; defaults apply for every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master RNG seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus and export it under --out.
    GenData,
    /// Pre-train the speech encoder + CTC head.
    PretrainAsr,
    /// Pre-train the shared transformer on the text pairs.
    PretrainMt,
    /// Fine-tune with the auxiliary branch, then evaluate dev/test BLEU.
    FinetuneSt {
        #[arg(long)]
        asr_ckpt: Option<PathBuf>,
        #[arg(long)]
        mt_ckpt: Option<PathBuf>,
    },
    /// Decode a split with beam search and report BLEU.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Run a preset experiment grid over seeds and emit reports.
    Sweep {
        #[arg(long, default_value = "table2")]
        preset: String,
        /// Comma-separated seed list.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Worker threads for independent cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference validation of every objective's gradients.
    GradCheck,
    /// CTC loss vs. brute-force path enumeration on random instances.
    CtcOracleCheck {
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
    /// Elementwise-average checkpoints into one file.
    AverageCkpts {
        files: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;

    match cli.cmd {
        Cmd::GenData => {
            let corpus = corpus_for(&cfg)?;
            let dir = out.join("corpus");
            export_corpus(&corpus, &dir)?;
            println!(
                "wrote corpus to {} (asr {}, mt {}, st train/dev/test {}/{}/{})",
                dir.display(),
                corpus.asr.len(),
                corpus.mt.len(),
                corpus.st_train.len(),
                corpus.st_dev.len(),
                corpus.st_test.len()
            );
        }
        Cmd::PretrainAsr => {
            let corpus = corpus_for(&cfg)?;
            let outcome = pretrain_asr(&corpus, &cfg)?;
            std::fs::create_dir_all(out)?;
            outcome.best.save(&out.join("asr.ckpt"))?;
            outcome.record.write_files(&out.join("asr_run"))?;
            let model = model_from_checkpoint(&outcome.best, &cfg, &corpus)?;
            let dev_pairs: Vec<_> = corpus
                .st_dev
                .iter()
                .map(|u| (u.speech.clone(), u.transcript.clone()))
                .collect();
            let ter = asr_token_error_rate(&model, &dev_pairs, cfg.precision)?;
            println!(
                "asr: best dev loss {:.4} at epoch {} (stopped {}), dev TER {:.2}%; checkpoint {}",
                outcome.record.best_dev,
                outcome.record.best_epoch,
                outcome.record.stopped_epoch,
                100.0 * ter,
                out.join("asr.ckpt").display()
            );
        }
        Cmd::PretrainMt => {
            let corpus = corpus_for(&cfg)?;
            let outcome = pretrain_mt(&corpus, &cfg)?;
            std::fs::create_dir_all(out)?;
            outcome.best.save(&out.join("mt.ckpt"))?;
            outcome.record.write_files(&out.join("mt_run"))?;
            let model = model_from_checkpoint(&outcome.best, &cfg, &corpus)?;
            let acc = mt_dev_accuracy(&model, &corpus, cfg.precision)?;
            println!(
                "mt: best dev loss {:.4} at epoch {} (stopped {}), dev token accuracy {:.2}%; checkpoint {}",
                outcome.record.best_dev,
                outcome.record.best_epoch,
                outcome.record.stopped_epoch,
                100.0 * acc,
                out.join("mt.ckpt").display()
            );
        }
        Cmd::FinetuneSt { asr_ckpt, mt_ckpt } => {
            if let Some(p) = asr_ckpt {
                cfg.asr_ckpt = p.display().to_string();
            }
            if let Some(p) = mt_ckpt {
                cfg.mt_ckpt = p.display().to_string();
            }
            let corpus = corpus_for(&cfg)?;
            let (asr, mt) = pretrained_for(&cfg, &corpus)?;
            let outcome = run_experiment(&cfg, &corpus, &asr, &mt)?;
            std::fs::create_dir_all(out)?;
            outcome.best.save(&out.join("st_best.ckpt"))?;
            outcome.averaged.save(&out.join("st_avg.ckpt"))?;
            outcome.record.write_files(&out.join("st_run"))?;
            std::fs::write(
                out.join("st_run").join("result.txt"),
                format!(
                    "dev_bleu = {}\ntest_bleu = {}\nconvergence_epoch = {}\nstopped_epoch = {}\n",
                    outcome.dev_bleu,
                    outcome.test_bleu,
                    outcome.record.convergence_epoch(),
                    outcome.record.stopped_epoch
                ),
            )?;
            println!(
                "st: dev BLEU {:.2}, test BLEU {:.2} (beam {}), converged at epoch {}",
                outcome.dev_bleu,
                outcome.test_bleu,
                cfg.beam_size,
                outcome.record.convergence_epoch()
            );
        }
        Cmd::Evaluate { ckpt, split, beam } => {
            let corpus = corpus_for(&cfg)?;
            let ck = Checkpoint::load(&ckpt)?;
            let model = model_from_checkpoint(&ck, &cfg, &corpus)?;
            let split_data = match split.as_str() {
                "dev" => &corpus.st_dev,
                "test" => &corpus.st_test,
                other => {
                    return Err(Error::InvalidArg(format!(
                        "unknown split '{other}' (expected dev or test)"
                    )))
                }
            };
            let beam = beam.unwrap_or(cfg.beam_size);
            let bleu = translate_bleu(&model, split_data, beam, cfg.max_decode_len, cfg.precision)?;
            println!("{split} BLEU {bleu:.2} (beam {beam}, {} sentences)", split_data.len());
        }
        Cmd::Sweep { preset, seeds, jobs } => {
            let seeds: Vec<u64> = seeds
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("bad seed '{s}': {e}")))
                })
                .collect::<Result<_>>()?;
            let spec = SweepSpec::preset(&preset, &seeds)?;
            let outputs = run_sweep(&cfg, &spec, jobs)?;
            emit_report(&outputs, out)?;
            print!("{}", outputs.table.summary_tsv());
            println!("reports written to {}", out.display());
        }
        Cmd::GradCheck => {
            let reports = grad_check_suite(cfg.seed)?;
            let mut all_ok = true;
            for (name, report) in &reports {
                let ok = report.passed();
                all_ok &= ok;
                println!(
                    "{} {name}: max relative error {:.3e} (tol {:.0e})",
                    if ok { "PASS" } else { "FAIL" },
                    report.max_rel_err(),
                    report.tol
                );
            }
            if !all_ok {
                return Err(Error::InvalidArg("gradient check failed".into()));
            }
        }
        Cmd::CtcOracleCheck { cases } => {
            let (n, max_diff) = ctc_oracle_suite(cases, cfg.seed)?;
            let ok = max_diff < 1e-6;
            println!(
                "{} ctc vs enumeration oracle: {n} instances, max |diff| {max_diff:.3e}",
                if ok { "PASS" } else { "FAIL" }
            );
            if !ok {
                return Err(Error::InvalidArg("CTC oracle check failed".into()));
            }
        }
        Cmd::AverageCkpts { files, output } => {
            if files.is_empty() {
                return Err(Error::EmptyInput("no checkpoint files given".into()));
            }
            let ckpts: Vec<Checkpoint> = files
                .iter()
                .map(|p| Checkpoint::load(Path::new(p)))
                .collect::<Result<_>>()?;
            let avg = average_checkpoints(&ckpts)?;
            avg.save(&output)?;
            println!("averaged {} checkpoints into {}", ckpts.len(), output.display());
        }
    }
    Ok(())
}
