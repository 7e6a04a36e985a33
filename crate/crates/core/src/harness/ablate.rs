use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::evaluate::{evaluate, select};
use super::train::{train, TrainOptions};
use crate::error::{Error, Result};
use crate::synth::{read_dataset, Task};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub image_data: bool,
    pub video_gen_data: bool,
    pub video_edit_data: bool,
    pub interleave: bool,
    pub seq_pe: bool,
    /// Mean loss over the last 50 steps.
    pub final_loss: f64,
    /// Held-out video editing, averaged over samples.
    pub edit_accuracy: f64,
    pub success_rate: f64,
    pub edit_psnr: f64,
    pub preserve_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Data-mix grid, full data last.
    pub data_rows: Vec<AblationRow>,
    /// Design grid, full design last.
    pub design_rows: Vec<AblationRow>,
    /// Video generation data only; the reference for transfer from images.
    pub video_gen_only: AblationRow,
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

impl AblationReport {
    pub fn full(&self) -> &AblationRow {
        self.data_rows.last().expect("grid is non-empty")
    }

    pub fn data_row(&self, image: bool, video_gen: bool, video_edit: bool) -> Option<&AblationRow> {
        self.data_rows
            .iter()
            .find(|r| (r.image_data, r.video_gen_data, r.video_edit_data) == (image, video_gen, video_edit))
    }

    pub fn to_markdown(&self) -> String {
        let metrics = |r: &AblationRow| {
            format!(
                "{:.3} | {:.3} | {:.2} | {:.2} | {:.4}",
                r.edit_accuracy, r.success_rate, r.edit_psnr, r.preserve_psnr, r.final_loss
            )
        };
        let mut out = String::from("Training data\n\n");
        out.push_str("| Image | Video Gen | Video Edit | edit acc | success | edit PSNR | preserve PSNR | loss |\n");
        out.push_str("|---|---|---|---|---|---|---|---|\n");
        for r in self.data_rows.iter().chain(std::iter::once(&self.video_gen_only)) {
            out.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                mark(r.image_data),
                mark(r.video_gen_data),
                mark(r.video_edit_data),
                metrics(r)
            ));
        }
        out.push_str("\nModel design\n\n");
        out.push_str("| Interleave | Sequential PE | edit acc | success | edit PSNR | preserve PSNR | loss |\n");
        out.push_str("|---|---|---|---|---|---|---|\n");
        for r in &self.design_rows {
            out.push_str(&format!("| {} | {} | {} |\n", mark(r.interleave), mark(r.seq_pe), metrics(r)));
        }
        out
    }
}

/// Variants of `base`: `(name, image, video_gen, video_edit, interleave, seq_pe)`.
pub const GRID: [(&str, bool, bool, bool, bool, bool); 8] = [
    ("no_video_edit", true, true, false, true, true),
    ("video_edit_only", false, false, true, true, true),
    ("no_video_gen", true, false, true, true, true),
    ("no_image", false, true, true, true, true),
    ("full", true, true, true, true, true),
    ("video_gen_only", false, true, false, true, true),
    ("no_seq_pe", true, true, true, true, false),
    ("no_interleave", true, true, true, false, true),
];

/// Train and evaluate every variant at the seed and step count of `base`.
/// Each run lives in `out_dir/<name>`; the report is also written as
/// `report.json` and `report.md`.
pub fn run_ablations(base: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<AblationReport> {
    let (_, test) = read_dataset(data_dir, "test")?;
    let held_out = select(&test, base.eval.max_per_task, Task::is_video_edit);
    let mut rows = Vec::with_capacity(GRID.len());
    for (name, image, vgen, vedit, interleave, seq_pe) in GRID {
        let mut cfg = base.clone();
        let a = &mut cfg.ablation;
        (a.image_data, a.video_gen_data, a.video_edit_data, a.interleave, a.seq_pe) = (image, vgen, vedit, interleave, seq_pe);
        log::info!("ablation run {name}");
        let outcome = train(
            &cfg,
            data_dir,
            &out_dir.join(name),
            &TrainOptions {
                resume: false,
                stop_at: None,
            },
        )?;
        let ck = super::checkpoint::Checkpoint::load(&outcome.checkpoint)?;
        let report = evaluate(&cfg, &ck.params, &held_out)?;
        let all = |_: Task| true;
        rows.push(AblationRow {
            name: name.to_string(),
            image_data: image,
            video_gen_data: vgen,
            video_edit_data: vedit,
            interleave,
            seq_pe,
            final_loss: outcome.tail_loss(50),
            edit_accuracy: report.mean_over(all, |r| r.edit_accuracy),
            success_rate: report.mean_over(all, |r| r.success_rate),
            edit_psnr: report.mean_over(all, |r| r.edit_psnr),
            preserve_psnr: report.mean_over(all, |r| r.preserve_psnr),
        });
    }
    let by_name = |n: &str| rows.iter().find(|r| r.name == n).expect("grid row").clone();
    let report = AblationReport {
        data_rows: ["no_video_edit", "video_edit_only", "no_video_gen", "no_image", "full"]
            .map(by_name)
            .to_vec(),
        design_rows: ["no_seq_pe", "no_interleave", "full"].map(by_name).to_vec(),
        video_gen_only: by_name("video_gen_only"),
    };
    let json = out_dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(&report).expect("serializable")).map_err(|e| Error::io(&json, e))?;
    let md = out_dir.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    Ok(report)
}
