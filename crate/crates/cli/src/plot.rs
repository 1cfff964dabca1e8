//! SVG figures: Dice and failure-rate curves with bootstrap bands and
//! significance markers, and radial k-space profiles.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use kseg::models::ModelVariant;
use kseg::{Error, Result};

use crate::commands::ConditionSummary;

const SIZE: (u32, u32) = (900, 600);

fn color(v: ModelVariant) -> RGBColor {
    match v {
        ModelVariant::HybridKspaceToImage => RGBColor(214, 39, 40),
        ModelVariant::NativeKspace => RGBColor(44, 160, 44),
        ModelVariant::ImageMagnitude => RGBColor(31, 119, 180),
        ModelVariant::ImageComplex => RGBColor(255, 127, 14),
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(0, 0, 0),
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

fn by_model(summaries: &[ConditionSummary]) -> BTreeMap<ModelVariant, Vec<&ConditionSummary>> {
    let mut m: BTreeMap<ModelVariant, Vec<&ConditionSummary>> = BTreeMap::new();
    for s in summaries {
        m.entry(s.model).or_default().push(s);
    }
    for v in m.values_mut() {
        v.sort_by(|a, b| a.condition_value.total_cmp(&b.condition_value));
    }
    m
}

fn x_range(summaries: &[ConditionSummary]) -> (f64, f64) {
    let lo = summaries.iter().map(|s| s.condition_value).fold(f64::INFINITY, f64::min);
    let hi = summaries.iter().map(|s| s.condition_value).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

/// Mean Dice per model against the condition value, 95% bootstrap bands,
/// and an asterisk above each significant condition.
pub fn dice_curves(path: &Path, summaries: &[ConditionSummary], condition_type: &str, significant: &[f64]) -> Result<()> {
    let e = plot_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&e)?;
    let (lo, hi) = x_range(summaries);
    let xlabel = if condition_type == "acceleration" { "Acceleration factor R" } else { "SNR (dB)" };
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Dice vs {condition_type}"), ("sans-serif", 24))
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(55)
        .build_cartesian_2d(lo..hi, 0.0..1.08)
        .map_err(&e)?;
    chart
        .configure_mesh()
        .x_desc(xlabel)
        .y_desc("Dice")
        .draw()
        .map_err(&e)?;
    for (model, points) in by_model(summaries) {
        let c = color(model);
        let mut band: Vec<(f64, f64)> = points.iter().map(|s| (s.condition_value, s.ci_high)).collect();
        band.extend(points.iter().rev().map(|s| (s.condition_value, s.ci_low)));
        chart.draw_series(std::iter::once(Polygon::new(band, c.mix(0.18)))).map_err(&e)?;
        chart
            .draw_series(LineSeries::new(points.iter().map(|s| (s.condition_value, s.mean_dice)), c.stroke_width(2)))
            .map_err(&e)?
            .label(model.short_name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
        chart
            .draw_series(points.iter().map(|s| Circle::new((s.condition_value, s.mean_dice), 3, c.filled())))
            .map_err(&e)?;
    }
    chart
        .draw_series(significant.iter().map(|&x| Text::new("*", (x, 1.03), ("sans-serif", 22))))
        .map_err(&e)?;
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(&e)?;
    root.present().map_err(&e)
}

/// Fraction of patients with Dice exactly zero per model.
pub fn failure_curves(path: &Path, summaries: &[ConditionSummary]) -> Result<()> {
    let e = plot_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&e)?;
    let (lo, hi) = x_range(summaries);
    let mut chart = ChartBuilder::on(&root)
        .caption("Catastrophic failure rate", ("sans-serif", 24))
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(55)
        .build_cartesian_2d(lo..hi, 0.0..1.02)
        .map_err(&e)?;
    chart
        .configure_mesh()
        .x_desc("Acceleration factor R")
        .y_desc("Fraction with Dice = 0")
        .draw()
        .map_err(&e)?;
    for (model, points) in by_model(summaries) {
        let c = color(model);
        chart
            .draw_series(LineSeries::new(points.iter().map(|s| (s.condition_value, s.failure_rate)), c.stroke_width(2)))
            .map_err(&e)?
            .label(model.short_name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(&e)?;
    root.present().map_err(&e)
}

/// `channel -> [(bin_center, normalized_energy)]` from a profile CSV.
pub fn read_profiles(path: &Path) -> Result<BTreeMap<String, Vec<(f64, f64)>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(bytes.as_slice());
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 columns, found {}", rec.len())));
        }
        let x: f64 = rec[0].parse().map_err(|_| bad("invalid bin_center".into()))?;
        let y: f64 = rec[2].parse().map_err(|_| bad("invalid normalized_energy".into()))?;
        out.entry(rec[3].to_string()).or_default().push((x, y));
    }
    if out.is_empty() {
        return Err(bad("no profile rows".into()));
    }
    Ok(out)
}

/// Peak-normalized radial energy per channel on a log scale.
pub fn profile_curves(path: &Path, curves: &BTreeMap<String, Vec<(f64, f64)>>) -> Result<()> {
    let e = plot_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&e)?;
    let floor = 1e-8;
    let x_hi = curves.values().flatten().map(|p| p.0).fold(0.0, f64::max).max(1e-3);
    let mut chart = ChartBuilder::on(&root)
        .caption("Radial k-space energy", ("sans-serif", 24))
        .margin(20)
        .x_label_area_size(45)
        .y_label_area_size(65)
        .build_cartesian_2d(0.0..x_hi, (floor..1.5).log_scale())
        .map_err(&e)?;
    chart
        .configure_mesh()
        .x_desc("Normalized spatial frequency")
        .y_desc("Energy / peak")
        .draw()
        .map_err(&e)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let c = if name == "input" { BLACK } else { PALETTE[1 + i % (PALETTE.len() - 1)] };
        let width = if name == "input" || name == "channel_mean" { 3 } else { 1 };
        chart
            .draw_series(LineSeries::new(pts.iter().map(|&(x, y)| (x, y.max(floor))), c.stroke_width(width)))
            .map_err(&e)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(width)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(&e)?;
    root.present().map_err(&e)
}
