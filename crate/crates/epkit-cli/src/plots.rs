//! Plot emission: small self-contained SVG charts rendered straight from
//! the CSV artifacts, so every curve in a figure is backed by a table a
//! reader can diff. Missing or empty tables produce a warning and no file,
//! never an error — plotting is a view, not a computation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::csvio::{parse_f64, read_csv, CsvFile, FRONTIER_SCHEMA, TABLE_SCHEMA};
use crate::frontier::XAxis;
use crate::CliError;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const PALETTE: &[&str] = &["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

/// One plotted curve: points, an optional (lo, hi) band, and line style.
#[derive(Clone, Debug, Default)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Per-x (lo, hi) envelope drawn as a translucent band.
    pub band: Option<Vec<(f64, f64, f64)>>,
    pub dashed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    /// Short annotation lines drawn inside the plot area.
    pub notes: Vec<String>,
}

fn usable(v: f64, log: bool) -> bool {
    v.is_finite() && (!log || v > 0.0)
}

fn tf(v: f64, log: bool) -> f64 {
    if log {
        v.log10()
    } else {
        v
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick positions (in transformed coordinates) and their labels.
fn ticks(lo: f64, hi: f64, log: bool) -> Vec<(f64, String)> {
    let mut out = Vec::new();
    if log {
        // One tick per decade, thinned when the span is wide.
        let (a, b) = (lo.floor() as i64, hi.ceil() as i64);
        let span = (b - a).max(1);
        let stride = (span as usize).div_ceil(8).max(1) as i64;
        let mut k = a;
        while k <= b {
            let t = k as f64;
            if t >= lo - 1e-9 && t <= hi + 1e-9 {
                out.push((t, format!("1e{k}")));
            }
            k += stride;
        }
        if out.is_empty() {
            out.push((lo, format!("{:.3}", 10f64.powf(lo))));
        }
    } else {
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| span / s <= 6.0)
            .unwrap_or(10.0 * mag);
        let mut t = (lo / step).ceil() * step;
        while t <= hi + 1e-9 * span {
            let label = if step >= 1.0 { format!("{t:.0}") } else { format!("{t}") };
            out.push((t, label));
            t += step;
        }
    }
    out
}

impl Chart {
    /// Renders the chart, or `None` when no series has a drawable point.
    pub fn render(&self) -> Option<String> {
        // Transformed data ranges over everything drawable.
        let mut lo_x = f64::INFINITY;
        let mut hi_x = f64::NEG_INFINITY;
        let mut lo_y = f64::INFINITY;
        let mut hi_y = f64::NEG_INFINITY;
        let mut any = false;
        for s in &self.series {
            for &(x, y) in &s.points {
                if usable(x, self.log_x) && usable(y, self.log_y) {
                    any = true;
                    lo_x = lo_x.min(tf(x, self.log_x));
                    hi_x = hi_x.max(tf(x, self.log_x));
                    lo_y = lo_y.min(tf(y, self.log_y));
                    hi_y = hi_y.max(tf(y, self.log_y));
                }
            }
            if let Some(band) = &s.band {
                for &(x, lo, hi) in band {
                    if usable(x, self.log_x) && usable(lo, self.log_y) && usable(hi, self.log_y) {
                        lo_y = lo_y.min(tf(lo, self.log_y));
                        hi_y = hi_y.max(tf(hi, self.log_y));
                    }
                }
            }
        }
        if !any {
            return None;
        }
        if hi_x - lo_x < 1e-12 {
            lo_x -= 0.5;
            hi_x += 0.5;
        }
        if hi_y - lo_y < 1e-12 {
            lo_y -= 0.5;
            hi_y += 0.5;
        }
        let pad_x = 0.04 * (hi_x - lo_x);
        let pad_y = 0.06 * (hi_y - lo_y);
        let (lo_x, hi_x) = (lo_x - pad_x, hi_x + pad_x);
        let (lo_y, hi_y) = (lo_y - pad_y, hi_y + pad_y);

        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (tf(x, self.log_x) - lo_x) / (hi_x - lo_x) * plot_w;
        let sy = |y: f64| MARGIN_TOP + (hi_y - tf(y, self.log_y)) / (hi_y - lo_y) * plot_h;

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        svg.push_str(&format!(
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            px(WIDTH / 2.0),
            xml_escape(&self.title)
        ));

        // Grid and axis ticks (computed in transformed space).
        for (t, label) in ticks(lo_x, hi_x, self.log_x) {
            let x = MARGIN_LEFT + (t - lo_x) / (hi_x - lo_x) * plot_w;
            svg.push_str(&format!(
                "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#ddd\"/>\n",
                px(x),
                px(MARGIN_TOP),
                px(MARGIN_TOP + plot_h)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                px(x),
                px(MARGIN_TOP + plot_h + 16.0),
                xml_escape(&label)
            ));
        }
        for (t, label) in ticks(lo_y, hi_y, self.log_y) {
            let y = MARGIN_TOP + (hi_y - t) / (hi_y - lo_y) * plot_h;
            svg.push_str(&format!(
                "<line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"#ddd\"/>\n",
                px(y),
                px(MARGIN_LEFT),
                px(MARGIN_LEFT + plot_w)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
                px(MARGIN_LEFT - 6.0),
                px(y + 4.0),
                xml_escape(&label)
            ));
        }
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
            px(MARGIN_LEFT),
            px(MARGIN_TOP),
            px(plot_w),
            px(plot_h)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            px(MARGIN_LEFT + plot_w / 2.0),
            px(HEIGHT - 14.0),
            xml_escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
            px(MARGIN_TOP + plot_h / 2.0),
            px(MARGIN_TOP + plot_h / 2.0),
            xml_escape(&self.y_label)
        ));

        // Bands first so lines draw over them.
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if let Some(band) = &s.band {
                let ok: Vec<&(f64, f64, f64)> = band
                    .iter()
                    .filter(|(x, lo, hi)| {
                        usable(*x, self.log_x)
                            && usable(*lo, self.log_y)
                            && usable(*hi, self.log_y)
                    })
                    .collect();
                if ok.len() >= 2 {
                    let mut d = String::new();
                    for (j, (x, lo, _)) in ok.iter().enumerate() {
                        d.push_str(if j == 0 { "M" } else { "L" });
                        d.push_str(&format!("{},{} ", px(sx(*x)), px(sy(*lo))));
                    }
                    for (x, _, hi) in ok.iter().rev() {
                        d.push_str(&format!("L{},{} ", px(sx(*x)), px(sy(*hi))));
                    }
                    d.push('Z');
                    svg.push_str(&format!(
                        "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n"
                    ));
                }
            }
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let dash = if s.dashed { " stroke-dasharray=\"5 4\"" } else { "" };
            // Split the polyline wherever a point is unusable on this scale.
            let mut run: Vec<String> = Vec::new();
            let flush = |run: &mut Vec<String>, svg: &mut String| {
                if run.len() >= 2 {
                    svg.push_str(&format!(
                        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>\n",
                        run.join(" ")
                    ));
                }
                run.clear();
            };
            for &(x, y) in &s.points {
                if usable(x, self.log_x) && usable(y, self.log_y) {
                    run.push(format!("{},{}", px(sx(x)), px(sy(y))));
                } else {
                    flush(&mut run, &mut svg);
                }
            }
            flush(&mut run, &mut svg);
            for &(x, y) in &s.points {
                if usable(x, self.log_x) && usable(y, self.log_y) {
                    svg.push_str(&format!(
                        "<circle cx=\"{}\" cy=\"{}\" r=\"2.4\" fill=\"{color}\"/>\n",
                        px(sx(x)),
                        px(sy(y))
                    ));
                }
            }
        }

        // Legend, top-right inside the plot.
        let legend_x = MARGIN_LEFT + plot_w - 150.0;
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let y = MARGIN_TOP + 16.0 + 16.0 * i as f64;
            let dash = if s.dashed { " stroke-dasharray=\"5 4\"" } else { "" };
            svg.push_str(&format!(
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1.8\"{dash}/>\n",
                px(legend_x),
                px(y - 4.0),
                px(legend_x + 22.0),
                px(y - 4.0)
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\">{}</text>\n",
                px(legend_x + 28.0),
                px(y),
                xml_escape(&s.label)
            ));
        }
        for (i, note) in self.notes.iter().enumerate() {
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" fill=\"#555\" font-size=\"11\">{}</text>\n",
                px(MARGIN_LEFT + 8.0),
                px(MARGIN_TOP + 16.0 + 14.0 * i as f64),
                xml_escape(note)
            ));
        }
        svg.push_str("</svg>\n");
        Some(svg)
    }
}

// ---------------------------------------------------------------------------
// CSV → chart assembly
// ---------------------------------------------------------------------------

struct TableCells {
    variant: usize,
    step: usize,
    metric: usize,
    value: usize,
    stderr: usize,
}

fn table_cells(file: &CsvFile, path: &Path) -> Result<TableCells, CliError> {
    Ok(TableCells {
        variant: file.column("variant", path)?,
        step: file.column("step_size", path)?,
        metric: file.column("metric", path)?,
        value: file.column("value", path)?,
        stderr: file.column("stderr", path)?,
    })
}

fn bias_chart(path: &Path) -> Result<Chart, CliError> {
    let file = read_csv(path, TABLE_SCHEMA)?;
    let c = table_cells(&file, path)?;
    let mut bias: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut floor: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut notes = Vec::new();
    for row in &file.rows {
        let variant = row[c.variant].clone();
        match row[c.metric].as_str() {
            "bias" => {
                let x = parse_f64(&row[c.step], path)?;
                let y = parse_f64(&row[c.value], path)?;
                bias.entry(variant).or_default().push((x, y));
            }
            "noise-floor" => {
                let x = parse_f64(&row[c.step], path)?;
                let y = parse_f64(&row[c.value], path)?;
                floor.entry(variant).or_default().push((x, y));
            }
            "slope" => {
                let v = parse_f64(&row[c.value], path)?;
                notes.push(format!("{variant} slope {v:.2}"));
            }
            _ => {}
        }
    }
    let mut series = Vec::new();
    for (variant, points) in bias {
        series.push(Series { label: variant, points, band: None, dashed: false });
    }
    for (variant, points) in floor {
        series.push(Series {
            label: format!("{variant} noise floor"),
            points,
            band: None,
            dashed: true,
        });
    }
    Ok(Chart {
        title: "One-sweep update bias".into(),
        x_label: "step size".into(),
        y_label: "bias magnitude".into(),
        log_x: true,
        log_y: true,
        series,
        notes,
    })
}

fn budget_chart(path: &Path) -> Result<Chart, CliError> {
    let file = read_csv(path, TABLE_SCHEMA)?;
    let c = table_cells(&file, path)?;
    let mut by_variant: BTreeMap<String, (Vec<(f64, f64)>, Vec<(f64, f64, f64)>)> =
        BTreeMap::new();
    for row in &file.rows {
        if row[c.metric] != "l-decrease" {
            continue;
        }
        let x = parse_f64(&row[c.step], path)?;
        let v = parse_f64(&row[c.value], path)?;
        let se = parse_f64(&row[c.stderr], path)?;
        let entry = by_variant.entry(row[c.variant].clone()).or_default();
        entry.0.push((x, v));
        if se.is_finite() {
            entry.1.push((x, v - 2.0 * se, v + 2.0 * se));
        }
    }
    let series = by_variant
        .into_iter()
        .map(|(variant, (points, band))| Series {
            label: variant,
            points,
            band: if band.is_empty() { None } else { Some(band) },
            dashed: false,
        })
        .collect();
    Ok(Chart {
        title: "Objective decrease per fixed draw budget".into(),
        x_label: "step size".into(),
        y_label: "mean decrease of L".into(),
        log_x: true,
        log_y: false,
        series,
        notes: vec!["band: ±2 standard errors".into()],
    })
}

fn frontier_chart(path: &Path, x_axis: XAxis) -> Result<Chart, CliError> {
    let file = read_csv(path, FRONTIER_SCHEMA)?;
    let variant = file.column("variant", path)?;
    let x_col = file.column("x", path)?;
    let mean = file.column("kl_mean", path)?;
    let lo = file.column("kl_min", path)?;
    let hi = file.column("kl_max", path)?;
    let mut by_variant: BTreeMap<String, (Vec<(f64, f64)>, Vec<(f64, f64, f64)>)> =
        BTreeMap::new();
    for row in &file.rows {
        let x = parse_f64(&row[x_col], path)?;
        let m = parse_f64(&row[mean], path)?;
        let entry = by_variant.entry(row[variant].clone()).or_default();
        entry.0.push((x, m));
        entry.1.push((x, parse_f64(&row[lo], path)?, parse_f64(&row[hi], path)?));
    }
    let series = by_variant
        .into_iter()
        .map(|(label, (points, band))| Series { label, points, band: Some(band), dashed: false })
        .collect();
    Ok(Chart {
        title: format!("Accuracy–budget frontier ({})", x_axis.label()),
        x_label: format!("cumulative {}", x_axis.label()),
        y_label: "KL to reference".into(),
        log_x: true,
        log_y: true,
        series,
        notes: vec!["band: min/max over seeds at the frontier setting".into()],
    })
}

/// Renders every plot whose backing CSV exists in `dir`. Missing or
/// unusable tables are skipped with a warning on stderr.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let jobs: Vec<(PathBuf, &str, Box<dyn Fn(&Path) -> Result<Chart, CliError>>)> = vec![
        (dir.join("bias.csv"), "bias.svg", Box::new(bias_chart)),
        (dir.join("budget.csv"), "budget.svg", Box::new(budget_chart)),
        (
            dir.join("frontier-steps.csv"),
            "frontier-steps.svg",
            Box::new(|p| frontier_chart(p, XAxis::Steps)),
        ),
        (
            dir.join("frontier-seconds.csv"),
            "frontier-seconds.svg",
            Box::new(|p| frontier_chart(p, XAxis::Seconds)),
        ),
    ];
    for (source, name, build) in jobs {
        if !source.exists() {
            eprintln!("warning: {} not found; skipping {name}", source.display());
            continue;
        }
        let chart = build(&source)?;
        match chart.render() {
            Some(svg) => {
                let path = dir.join(name);
                crate::csvio::atomic_write(&path, svg.as_bytes())?;
                written.push(path);
            }
            None => eprintln!(
                "warning: {} has no drawable points; skipping {name}",
                source.display()
            ),
        }
    }
    Ok(written)
}
