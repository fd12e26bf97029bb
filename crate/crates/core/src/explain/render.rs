use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ChannelAttention, ComposedKernels, FeatureTable, SelfAttentionTrace};
use crate::error::{Error, Result};

pub fn explain_file_stem(kind: &str, segment_id: &str) -> String {
    format!("explain_{kind}_{segment_id}")
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let run = || -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    };
    run().map_err(|e| Error::io(path, std::io::Error::from(e)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Vertical bars over a zero baseline, one per value, labelled underneath.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64]) -> String {
    let (w, h, margin) = (40.0 + 18.0 * values.len() as f64, 240.0, 30.0);
    let hi = values.iter().cloned().fold(0.0_f64, f64::max);
    let lo = values.iter().cloned().fold(0.0_f64, f64::min);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_h = h - 2.0 * margin - 30.0;
    let y_of = |v: f64| margin + (hi - v) / span * plot_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="14" font-size="12">{}</text>"#, escape(title));
    let zero = y_of(0.0);
    let _ = writeln!(s, r#"<line x1="20" y1="{zero:.2}" x2="{}" y2="{zero:.2}" stroke="black"/>"#, w - 10.0);
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let x = 24.0 + 18.0 * i as f64;
        let (top, bottom) = if v >= 0.0 { (y_of(v), zero) } else { (zero, y_of(v)) };
        let fill = if v >= 0.0 { "#c0392b" } else { "#2c7fb8" };
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{top:.2}" width="14" height="{:.2}" fill="{fill}"><title>{}: {v:.4}</title></rect>"#,
            (bottom - top).max(0.5),
            escape(label)
        );
        let ty = h - margin;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ty:.2}" transform="rotate(-60 {:.2} {ty:.2})">{}</text>"#,
            x + 7.0,
            x + 7.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn stack_svgs(parts: &[String]) -> String {
    let mut s = String::from(r#"<svg xmlns="http://www.w3.org/2000/svg">"#);
    s.push('\n');
    let mut y = 0.0;
    for p in parts {
        let inner = p.replacen("<svg ", &format!(r#"<svg y="{y}" "#), 1);
        s.push_str(&inner);
        y += 250.0;
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv` (channel rows, one normalized and one raw column per stream) and `<stem>.svg`.
pub fn write_channel_attention(ca: &ChannelAttention, dir: &Path, segment_id: &str) -> Result<Vec<PathBuf>> {
    let stem = explain_file_stem("channel_attention", segment_id);
    let mut header = vec!["channel".to_string()];
    header.extend(ca.kernel_sizes.iter().map(|k| format!("k{k}")));
    header.extend(ca.kernel_sizes.iter().map(|k| format!("k{k}_raw")));
    let rows: Vec<Vec<String>> = ca
        .channel_names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let mut r = vec![name.clone()];
            r.extend(ca.normalized.iter().map(|s| num(s[m])));
            r.extend(ca.aggregated.iter().map(|s| num(s[m])));
            r
        })
        .collect();
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(&csv_path, &header, &rows)?;
    let charts: Vec<String> = ca
        .kernel_sizes
        .iter()
        .zip(&ca.normalized)
        .map(|(k, v)| bar_chart_svg(&format!("kernel {k}"), &ca.channel_names, v))
        .collect();
    let svg_path = dir.join(format!("{stem}.svg"));
    write_text(&svg_path, &stack_svgs(&charts))?;
    Ok(vec![csv_path, svg_path])
}

/// Writes `<stem>.csv` (token, time, normalized, raw, per-layer columns) and `<stem>.svg`.
pub fn write_self_attention(tr: &SelfAttentionTrace, dir: &Path, segment_id: &str) -> Result<Vec<PathBuf>> {
    let stem = explain_file_stem("self_attention", segment_id);
    let mut header: Vec<String> = ["token", "time_s", "normalized", "raw"].map(String::from).to_vec();
    header.extend((1..=tr.per_layer.len()).map(|l| format!("layer{l}")));
    let rows: Vec<Vec<String>> = (0..tr.raw.len())
        .map(|i| {
            let mut r = vec![i.to_string(), num(tr.token_times_s[i]), num(tr.normalized[i]), num(tr.raw[i])];
            r.extend(tr.per_layer.iter().map(|l| num(l[i])));
            r
        })
        .collect();
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(&csv_path, &header, &rows)?;
    let labels: Vec<String> = tr.token_times_s.iter().map(|t| format!("{t:.2}")).collect();
    let svg_path = dir.join(format!("{stem}.svg"));
    write_text(&svg_path, &bar_chart_svg("class-token attention", &labels, &tr.normalized))?;
    Ok(vec![csv_path, svg_path])
}

/// Writes `<stem>.csv` (one row per feature channel) and `<stem>.svg` of every kernel's taps.
pub fn write_kernels(ck: &ComposedKernels, dir: &Path, segment_id: &str) -> Result<Vec<PathBuf>> {
    let stem = explain_file_stem("kernels", segment_id);
    let n_taps = ck.kernels.first().map_or(0, |k| k.taps.len());
    let mut header: Vec<String> = ["channel", "source_channel", "bias"].map(String::from).to_vec();
    header.extend((0..n_taps).map(|i| format!("tap{i}")));
    let rows: Vec<Vec<String>> = ck
        .kernels
        .iter()
        .map(|k| {
            let mut r = vec![k.channel.to_string(), k.source_channel.to_string(), num(k.bias)];
            r.extend(k.taps.iter().map(|&t| num(t)));
            r
        })
        .collect();
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(&csv_path, &header, &rows)?;

    let (w, h) = (420.0, 240.0);
    let amp = ck
        .kernels
        .iter()
        .flat_map(|k| k.taps.iter())
        .fold(1e-12_f64, |a, &t| a.max(t.abs()));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<text x="4" y="14">{} taps, {:.3} s</text>"#, n_taps, ck.window_s());
    for k in &ck.kernels {
        let pts: Vec<String> = k
            .taps
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let x = 10.0 + (w - 20.0) * i as f64 / (n_taps.max(2) - 1) as f64;
                let y = h / 2.0 - t / amp * (h / 2.0 - 20.0);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-opacity="0.4"/>"#,
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    let svg_path = dir.join(format!("{stem}.svg"));
    write_text(&svg_path, &s)?;
    Ok(vec![csv_path, svg_path])
}

/// Writes `<stem>.csv`: segment id, label, then the flattened features.
pub fn write_features(t: &FeatureTable, dir: &Path, segment_id: &str) -> Result<PathBuf> {
    let stem = explain_file_stem(&format!("features_{}", t.stage), segment_id);
    let mut header: Vec<String> = vec!["segment_id".into(), "label".into()];
    header.extend((0..t.width()).map(|i| format!("f{i}")));
    let rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .zip(&t.segment_ids)
        .zip(&t.labels)
        .map(|((row, id), label)| {
            let mut r = vec![id.clone(), label.to_string()];
            r.extend(row.iter().map(|&v| num(v)));
            r
        })
        .collect();
    let path = dir.join(format!("{stem}.csv"));
    write_csv(&path, &header, &rows)?;
    Ok(path)
}
