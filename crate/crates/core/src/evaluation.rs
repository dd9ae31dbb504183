//! Exploration performance: grid coverage of reached outcomes, cumulative
//! coverage curves, slope changes and CSV export.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::env_sim::{EnvConfig, Point};
use crate::error::{argument, Result};
use crate::imgep::HistoryEntry;

/// Cells per dimension used throughout.
pub const DEFAULT_BINS: usize = 30;

/// Default slope window on each side of a switch.
pub const DEFAULT_SLOPE_WINDOW: usize = 500;

/// Occupancy of an axis-aligned grid over a 2-D outcome space.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageGrid {
    bounds: [[f64; 2]; 2],
    bins: usize,
    occupied: HashSet<usize>,
}

impl CoverageGrid {
    pub fn new(bounds: [[f64; 2]; 2], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(argument("bins must be positive"));
        }
        if bounds
            .iter()
            .any(|&[lo, hi]| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(argument(format!("degenerate coverage bounds {bounds:?}")));
        }
        Ok(Self {
            bounds,
            bins,
            occupied: HashSet::new(),
        })
    }

    /// Grid over the `[-1, 1]^2` scene frame.
    pub fn scene(bins: usize) -> Result<Self> {
        Self::new([[-1.0, 1.0], [-1.0, 1.0]], bins)
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn cell_count(&self) -> usize {
        self.bins * self.bins
    }

    /// Cell of a point; points outside the bounds land in the edge cells.
    pub fn cell(&self, p: Point) -> [usize; 2] {
        let axis = |v: f64, [lo, hi]: [f64; 2]| {
            let t = ((v - lo) / (hi - lo) * self.bins as f64).floor();
            if t.is_nan() || t < 0.0 {
                0
            } else {
                (t as usize).min(self.bins - 1)
            }
        };
        [axis(p[0], self.bounds[0]), axis(p[1], self.bounds[1])]
    }

    /// Marks the cell of `p`; returns whether it was new.
    pub fn insert(&mut self, p: Point) -> bool {
        let [i, j] = self.cell(p);
        self.occupied.insert(i * self.bins + j)
    }

    pub fn occupied(&self) -> usize {
        self.occupied.len()
    }
}

/// Number of distinct cells containing at least one point.
pub fn coverage(points: &[Point], bounds: [[f64; 2]; 2], bins: usize) -> Result<usize> {
    let mut grid = CoverageGrid::new(bounds, bins)?;
    for &p in points {
        grid.insert(p);
    }
    Ok(grid.occupied())
}

/// `series[i]` is the coverage of the first `i + 1` points.
pub fn exploration_curve(
    points: &[Point],
    bounds: [[f64; 2]; 2],
    bins: usize,
) -> Result<Vec<usize>> {
    let mut grid = CoverageGrid::new(bounds, bins)?;
    Ok(points
        .iter()
        .map(|&p| {
            grid.insert(p);
            grid.occupied()
        })
        .collect())
}

/// Final ball positions of a history, in episode order.
pub fn ball_positions(history: &[HistoryEntry]) -> Vec<Point> {
    history
        .iter()
        .map(|e| e.outcome.final_scene.ball_pos)
        .collect()
}

/// Least-squares slopes of `series` over episodes `[switch - window, switch]`
/// and `[switch, switch + window]`; episodes are 1-based.
pub fn slope_change(series: &[usize], switch_episode: usize, window: usize) -> Result<(f64, f64)> {
    if window == 0 {
        return Err(argument("slope window must be positive"));
    }
    if switch_episode <= window || switch_episode + window > series.len() {
        return Err(argument(format!(
            "window of {window} around episode {switch_episode} exceeds a series of {}",
            series.len()
        )));
    }
    let fit = |first: usize, last: usize| {
        let xs: Vec<f64> = (first..=last).map(|e| e as f64).collect();
        let ys: Vec<f64> = (first..=last).map(|e| series[e - 1] as f64).collect();
        least_squares_slope(&xs, &ys)
    };
    Ok((
        fit(switch_episode - window, switch_episode),
        fit(switch_episode, switch_episode + window),
    ))
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Header of the scatter CSV; distractor columns are present only when the
/// rows have a distractor.
pub fn scatter_header(with_distractor: bool) -> Vec<&'static str> {
    let mut h = vec!["episode", "end_x", "end_y", "ball_x", "ball_y"];
    if with_distractor {
        h.extend(["distractor_x", "distractor_y"]);
    }
    h
}

/// Final object positions of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatterRow {
    pub episode: usize,
    pub end: Point,
    pub ball: Point,
    pub distractor: Option<Point>,
}

pub fn scatter_rows(history: &[HistoryEntry], env: &EnvConfig) -> Vec<ScatterRow> {
    history
        .iter()
        .map(|e| {
            let scene = &e.outcome.final_scene;
            ScatterRow {
                episode: e.episode,
                end: scene.end_effector(&env.link_lengths),
                ball: scene.ball_pos,
                distractor: scene.distractor_pos,
            }
        })
        .collect()
}

pub fn write_scatter_csv<W: Write>(rows: &[ScatterRow], w: W) -> Result<()> {
    let with_distractor = rows.iter().any(|r| r.distractor.is_some());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(scatter_header(with_distractor))?;
    for r in rows {
        let mut row = vec![
            r.episode.to_string(),
            r.end[0].to_string(),
            r.end[1].to_string(),
            r.ball[0].to_string(),
            r.ball[1].to_string(),
        ];
        if with_distractor {
            let d = r.distractor.unwrap_or([f64::NAN, f64::NAN]);
            row.push(d[0].to_string());
            row.push(d[1].to_string());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// `episode,cells_occupied`, one row per episode.
pub fn write_curve_csv<W: Write>(series: &[usize], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["episode", "cells_occupied"])?;
    for (i, c) in series.iter().enumerate() {
        out.write_record([(i + 1).to_string(), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a curve written by [`write_curve_csv`].
pub fn read_curve_csv<R: std::io::Read>(r: R) -> Result<Vec<usize>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut series = Vec::new();
    for rec in rd.deserialize::<(usize, usize)>() {
        series.push(rec?.1);
    }
    Ok(series)
}

/// Writes `scatter.csv` and `curve.csv` (ball coverage) into `dir`.
pub fn export(
    rows: &[ScatterRow],
    bounds: [[f64; 2]; 2],
    bins: usize,
    dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let scatter = dir.join("scatter.csv");
    let curve = dir.join("curve.csv");
    write_scatter_csv(rows, BufWriter::new(File::create(&scatter)?))?;
    let balls: Vec<Point> = rows.iter().map(|r| r.ball).collect();
    let series = exploration_curve(&balls, bounds, bins)?;
    write_curve_csv(&series, BufWriter::new(File::create(&curve)?))?;
    Ok((scatter, curve))
}
