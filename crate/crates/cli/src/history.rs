//! Per-episode history CSV.
//!
//! Columns: `episode`, `context_*`, `theta_*`, the engineered features
//! (`f_*`), the final scene (`end_x`, `end_y`, `ball_x`, `ball_y` and, with a
//! distractor, `distractor_x`, `distractor_y`), `goal_*`, `module` and
//! `cost`. Goal, module and cost are empty for babbling episodes.

use std::io::{Read, Write};

use anyhow::{anyhow, Context, Result};
use imgep_core::env_sim::{EnvConfig, EnvVariant};
use imgep_core::evaluation::{scatter_header, scatter_rows, ScatterRow};
use imgep_core::imgep::HistoryEntry;

pub fn feature_names(variant: EnvVariant) -> &'static [&'static str] {
    match variant {
        EnvVariant::ArmBall => &["f_end_x", "f_end_y", "f_ball_r", "f_ball_phi"],
        EnvVariant::Arm2Balls => &[
            "f_end_x",
            "f_end_y",
            "f_ball_x",
            "f_ball_y",
            "f_distractor_x",
            "f_distractor_y",
        ],
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_history<W: Write>(history: &[HistoryEntry], env: &EnvConfig, w: W) -> Result<()> {
    let context_len = history.first().map_or(0, |e| e.context.len());
    let theta_len = history.first().map_or(0, |e| e.params.len());
    let goal_len = history
        .iter()
        .filter_map(|e| e.goal.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let with_distractor = env.variant == EnvVariant::Arm2Balls;

    let mut header: Vec<String> = vec!["episode".into()];
    header.extend((0..context_len).map(|i| format!("context_{i}")));
    header.extend((0..theta_len).map(|i| format!("theta_{i}")));
    header.extend(feature_names(env.variant).iter().map(|s| s.to_string()));
    header.extend(
        scatter_header(with_distractor)
            .iter()
            .skip(1)
            .map(|s| s.to_string()),
    );
    header.extend((0..goal_len).map(|i| format!("goal_{i}")));
    header.extend(["module".into(), "cost".into()]);

    let mut out = csv::Writer::from_writer(w);
    out.write_record(&header)?;
    for (e, s) in history.iter().zip(scatter_rows(history, env)) {
        let mut row = vec![e.episode.to_string()];
        row.extend(e.context.iter().map(f64::to_string));
        row.extend(e.params.as_slice().iter().map(f64::to_string));
        row.extend(e.outcome.engineered_features.iter().map(f64::to_string));
        row.extend([s.end[0], s.end[1], s.ball[0], s.ball[1]].map(|v| v.to_string()));
        if with_distractor {
            let d = s.distractor.unwrap_or([f64::NAN, f64::NAN]);
            row.extend([d[0].to_string(), d[1].to_string()]);
        }
        match &e.goal {
            Some(g) => row.extend((0..goal_len).map(|i| opt(g.get(i).copied()))),
            None => row.extend((0..goal_len).map(|_| String::new())),
        }
        row.push(e.module.map(|m| m.to_string()).unwrap_or_default());
        row.push(opt(e.cost));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Final scene positions recorded in a history file.
pub fn read_scatter_rows<R: Read>(r: R) -> Result<Vec<ScatterRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            anyhow!(imgep_core::Error::Format(format!(
                "history has no {name} column"
            )))
        })
    };
    let [ep, ex, ey, bx, by] = ["episode", "end_x", "end_y", "ball_x", "ball_y"].map(col);
    let (ep, ex, ey, bx, by) = (ep?, ex?, ey?, bx?, by?);
    let distractor = col("distractor_x").ok().zip(col("distractor_y").ok());
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .with_context(|| format!("history row {}: bad value {:?}", line + 1, &rec[i]))
        };
        rows.push(ScatterRow {
            episode: rec[ep]
                .parse()
                .with_context(|| format!("history row {}: bad episode", line + 1))?,
            end: [num(ex)?, num(ey)?],
            ball: [num(bx)?, num(by)?],
            distractor: match distractor {
                Some((dx, dy)) => Some([num(dx)?, num(dy)?]),
                None => None,
            },
        });
    }
    Ok(rows)
}
