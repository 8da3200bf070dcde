//! Attention export and field-level aggregation.
//!
//! Token-level weights come from a forward pass in `f64`. For the field view,
//! tokens are grouped as: each field's digits plus its trailing separator,
//! then the label slot on its own. Pads after the label are dropped. A cell
//! `(qg, kg)` is the attention mass that queries in `qg` put on keys in `kg`,
//! averaged over the queries of `qg`, and each row is renormalized.

use std::fmt::Write as _;
use std::str::FromStr;

use packetlm::codec::{PacketCodec, TokenizedPacket};
use packetlm::model::{forward, ModelConfig, ModelParams};
use packetlm::tensor::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    PerHead,
    MeanHeads,
    MeanAll,
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-head" => Ok(Aggregation::PerHead),
            "mean-heads" | "mean-over-heads" => Ok(Aggregation::MeanHeads),
            "mean-all" | "mean-over-layers-and-heads" => Ok(Aggregation::MeanAll),
            other => Err(format!("unknown aggregation {other:?} (expected per-head, mean-heads or mean-all)")),
        }
    }
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::PerHead => "per-head",
            Aggregation::MeanHeads => "mean-heads",
            Aggregation::MeanAll => "mean-all",
        }
    }
}

/// One attention map after aggregation. `layer`/`head` are `None` when
/// averaged over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    /// `label_pos + 1` rows over the non-pad prefix; row `q` has `q + 1` entries.
    pub tokens: Vec<Vec<f64>>,
    /// `(F + 1) × (F + 1)`; the last group is the label slot.
    pub fields: Vec<Vec<f64>>,
    /// Field-level distribution of the query that predicts the label
    /// (the position just before the label slot).
    pub label_query: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub checkpoint_digest: String,
    pub source: String,
    pub mode: Aggregation,
    pub token_ids: Vec<usize>,
    pub token_text: Vec<String>,
    /// Field names followed by `"<label>"`.
    pub groups: Vec<String>,
    /// `[start, end)` token ranges of each group.
    pub spans: Vec<(usize, usize)>,
    pub maps: Vec<AttentionMap>,
}

/// Token groups: field spans (separator included) plus the label slot.
pub fn group_spans(codec: &PacketCodec, tp: &TokenizedPacket) -> Vec<(usize, usize)> {
    let mut spans = codec.field_spans(tp);
    spans.push((tp.label_pos, tp.label_pos + 1));
    spans
}

/// Field-level aggregation of one L×L attention matrix.
pub fn aggregate_fields(attn: &Matrix<f64>, spans: &[(usize, usize)]) -> Vec<Vec<f64>> {
    spans
        .iter()
        .map(|&(q0, q1)| {
            let mut row: Vec<f64> = spans
                .iter()
                .map(|&(k0, k1)| (q0..q1).map(|q| (k0..k1).map(|k| attn.get(q, k)).sum::<f64>()).sum::<f64>() / (q1 - q0) as f64)
                .collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|x| *x /= total);
            }
            row
        })
        .collect()
}

/// Mass a single query row puts on each group, renormalized.
pub fn query_row_fields(attn: &Matrix<f64>, q: usize, spans: &[(usize, usize)]) -> Vec<f64> {
    let mut row: Vec<f64> = spans.iter().map(|&(k0, k1)| (k0..k1).map(|k| attn.get(q, k)).sum()).collect();
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|x| *x /= total);
    }
    row
}

fn mean_matrix(ms: &[&Matrix<f64>]) -> Matrix<f64> {
    let mut out = Matrix::zeros(ms[0].rows(), ms[0].cols());
    for m in ms {
        for (o, x) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *o += *x;
        }
    }
    let k = ms.len() as f64;
    out.as_mut_slice().iter_mut().for_each(|x| *x /= k);
    out
}

fn token_text(codec: &PacketCodec, id: usize) -> String {
    let v = &codec.vocab;
    if v.is_digit(id) {
        id.to_string()
    } else if let Some(i) = v.separator_index(id) {
        format!("|{}", codec.schema.fields[i].name)
    } else if let Some(c) = v.label_of(id) {
        format!("<{}>", codec.schema.label_names[c])
    } else {
        "<pad>".to_string()
    }
}

/// Runs the model on `tp` and builds the report for `mode`.
pub fn attention_report(
    codec: &PacketCodec,
    params: &ModelParams<f64>,
    cfg: &ModelConfig,
    tp: &TokenizedPacket,
    mode: Aggregation,
    checkpoint_digest: &str,
    source: &str,
) -> CliResult<AttentionReport> {
    if tp.label_pos == 0 {
        return Err(CliError::Data("packet has no tokens before the label slot".into()));
    }
    let trace = forward(tp, params, cfg, true)?;
    let spans = group_spans(codec, tp);
    let keep = tp.label_pos + 1;

    let mut selected: Vec<(Option<usize>, Option<usize>, Matrix<f64>)> = Vec::new();
    match mode {
        Aggregation::PerHead => {
            for (l, heads) in trace.attention.iter().enumerate() {
                for (h, m) in heads.iter().enumerate() {
                    selected.push((Some(l), Some(h), m.clone()));
                }
            }
        }
        Aggregation::MeanHeads => {
            for (l, heads) in trace.attention.iter().enumerate() {
                selected.push((Some(l), None, mean_matrix(&heads.iter().collect::<Vec<_>>())));
            }
        }
        Aggregation::MeanAll => {
            let all: Vec<&Matrix<f64>> = trace.attention.iter().flatten().collect();
            selected.push((None, None, mean_matrix(&all)));
        }
    }

    let maps = selected
        .into_iter()
        .map(|(layer, head, m)| AttentionMap {
            layer,
            head,
            tokens: (0..keep).map(|q| (0..=q).map(|k| m.get(q, k)).collect()).collect(),
            fields: aggregate_fields(&m, &spans),
            label_query: query_row_fields(&m, tp.label_pos - 1, &spans),
        })
        .collect();

    let mut groups: Vec<String> = codec.schema.fields.iter().map(|f| f.name.clone()).collect();
    groups.push("<label>".into());
    Ok(AttentionReport {
        checkpoint_digest: checkpoint_digest.to_string(),
        source: source.to_string(),
        mode,
        token_ids: tp.token_ids[..keep].to_vec(),
        token_text: tp.token_ids[..keep].iter().map(|&id| token_text(codec, id)).collect(),
        groups,
        spans,
        maps,
    })
}

impl AttentionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "checkpoint {}  source {}  mode {}", self.checkpoint_digest, self.source, self.mode.as_str());
        let w = self.groups.iter().map(String::len).max().unwrap_or(0).max(8);
        for m in &self.maps {
            let tag = |x: Option<usize>| x.map_or("mean".to_string(), |v| v.to_string());
            let _ = writeln!(s, "\nlayer {} head {} (rows: query field, columns: key field)", tag(m.layer), tag(m.head));
            let _ = write!(s, "{:<w$}", "");
            for g in &self.groups {
                let _ = write!(s, " {g:>w$}");
            }
            s.push('\n');
            for (g, row) in self.groups.iter().zip(&m.fields) {
                let _ = write!(s, "{g:<w$}");
                for x in row {
                    let _ = write!(s, " {x:>w$.4}");
                }
                s.push('\n');
            }
            let _ = write!(s, "{:<w$}", "label q");
            for x in &m.label_query {
                let _ = write!(s, " {x:>w$.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Field-level heatmaps as a standalone SVG, one panel per map.
    pub fn to_svg(&self) -> String {
        let n = self.groups.len();
        let cell = 36.0;
        let margin = 110.0;
        let panel = margin + cell * n as f64 + 30.0;
        let width = panel * self.maps.len() as f64;
        let height = panel + 20.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
        );
        for (i, m) in self.maps.iter().enumerate() {
            let ox = panel * i as f64 + margin;
            let oy = margin;
            let tag = |x: Option<usize>| x.map_or("mean".to_string(), |v| v.to_string());
            let _ = writeln!(s, r#"<text x="{ox}" y="14">layer {} head {}</text>"#, tag(m.layer), tag(m.head));
            for (r, row) in m.fields.iter().enumerate() {
                let y = oy + cell * r as f64;
                let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, ox - 4.0, y + cell / 2.0 + 3.0, xml_escape(&self.groups[r]));
                for (c, &v) in row.iter().enumerate() {
                    let x = ox + cell * c as f64;
                    let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"><title>{:.4}</title></rect>"#,
                        v
                    );
                }
            }
            for (c, g) in self.groups.iter().enumerate() {
                let x = ox + cell * c as f64 + cell / 2.0;
                let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="start" transform="rotate(-60 {x} {})">{}</text>"#, oy - 4.0, oy - 4.0, xml_escape(g));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_renormalize_and_drop_nothing_inside_the_prefix() {
        // 4 tokens: field a = [0,2), field b = [2,3), label = [3,4)
        let mut m = Matrix::zeros(4, 4);
        let rows = [[1.0, 0.0, 0.0, 0.0], [0.3, 0.7, 0.0, 0.0], [0.2, 0.2, 0.6, 0.0], [0.1, 0.1, 0.1, 0.7]];
        for (q, r) in rows.iter().enumerate() {
            for (k, &v) in r.iter().enumerate() {
                m.set(q, k, v);
            }
        }
        let spans = [(0, 2), (2, 3), (3, 4)];
        let f = aggregate_fields(&m, &spans);
        assert!((f[0][0] - 1.0).abs() < 1e-15);
        assert!((f[1][0] - 0.4).abs() < 1e-15 && (f[1][1] - 0.6).abs() < 1e-15);
        assert!((f[2][0] - 0.2).abs() < 1e-15 && (f[2][2] - 0.7).abs() < 1e-15);
        assert_eq!(query_row_fields(&m, 1, &spans), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregation_names_parse() {
        for a in [Aggregation::PerHead, Aggregation::MeanHeads, Aggregation::MeanAll] {
            assert_eq!(a.as_str().parse::<Aggregation>().unwrap(), a);
        }
        assert!("max".parse::<Aggregation>().is_err());
    }
}
