//! `train`: fit the score network on a dataset directory and write the best
//! checkpoint plus the per-epoch history.

use crate::config::{resolved_config_text, RunConfig};
use crate::error::CliError;
use crate::io::{load_samples, prepare_out_dir};
use freqdiff_core::checkpoint::{load as load_checkpoint, save as save_checkpoint, Checkpoint};
use freqdiff_core::rng::{stream_rng, Stream};
use freqdiff_core::scorenet::{ScoreNetConfig, ScoreNetParams};
use freqdiff_core::sde::DiffusionSchedule;
use freqdiff_core::train::train_loop;
use std::path::Path;

pub fn run(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    init_from: Option<&Path>,
    force: bool,
) -> Result<(), CliError> {
    let dataset = load_samples(data)?;
    let (n, m) = (dataset[0].n, dataset[0].m);

    let net_cfg = ScoreNetConfig {
        n,
        m,
        n_layers: cfg.model.n_layers,
        d_model: cfg.model.d_model,
        n_heads: cfg.model.n_heads,
        rff_dim: cfg.model.rff_dim,
        q_for_all: cfg.model.q_for_all,
    };
    let init = match init_from {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.cfg != net_cfg {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was built for a different architecture or shape",
                    path.display()
                )));
            }
            ckpt.params
        }
        None => {
            let mut rng = stream_rng(cfg.train.seed, Stream::Init);
            ScoreNetParams::init(net_cfg, &mut rng)?
        }
    };

    prepare_out_dir(out, force)?;
    let sched = DiffusionSchedule { beta_min: cfg.sde.beta_min, beta_max: cfg.sde.beta_max, n_steps: 1000 };
    let outcome = train_loop(&cfg.train_config(), init, &dataset, &sched)?;

    let mut history = String::from("epoch,lr,train_loss,val_loss\n");
    for rec in &outcome.history {
        history.push_str(&format!("{},{},{},{}\n", rec.epoch, rec.lr, rec.train_loss, rec.val_loss));
    }
    std::fs::write(out.join("history.csv"), history)?;
    let best_epoch = outcome.best_epoch.unwrap_or(0);
    save_checkpoint(
        &out.join("checkpoint.ckpt"),
        &Checkpoint {
            params: outcome.params,
            stats: Some(outcome.stats.clone()),
            epoch: best_epoch,
        },
    )?;
    std::fs::write(out.join("resolved_config.toml"), resolved_config_text(cfg, "train")?)?;

    if let Some(msg) = outcome.aborted {
        return Err(CliError::Numeric(format!(
            "training aborted ({msg}); best checkpoint from epoch {best_epoch} was saved to {}",
            out.display()
        )));
    }
    eprintln!(
        "trained {} epochs on {} samples; best validation loss {:.6} at epoch {best_epoch}; wrote {}",
        cfg.train.epochs,
        dataset.len(),
        outcome.best_val_loss,
        out.display()
    );
    Ok(())
}
