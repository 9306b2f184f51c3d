//! Evaluation reports, per-sample score files and multi-stream fusion.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::kernels::softmax_in_place;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean negative log-probability of the true class.
    pub loss: f64,
    pub samples: usize,
}

/// Smallest probability used when taking logs.
const PROB_FLOOR: f64 = 1e-300;

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Report from per-sample class probabilities.
pub fn report_from_probs(probs: &[Vec<f64>], labels: &[usize]) -> Result<EvalReport> {
    if probs.is_empty() {
        return Err(Error::EmptyReduction("report over zero samples"));
    }
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "report_from_probs",
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    let k = probs[0].len();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if p.len() != k {
            return Err(Error::ShapeMismatch {
                op: "report_from_probs",
                lhs: vec![p.len()],
                rhs: vec![k],
            });
        }
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
        confusion[y][argmax(p)] += 1;
        loss -= p[y].max(PROB_FLOOR).ln();
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        top1: correct as f64 / probs.len() as f64,
        per_class,
        confusion,
        loss: loss / probs.len() as f64,
        samples: probs.len(),
    })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

pub fn report_from_logits(logits: &[Vec<f64>], labels: &[usize]) -> Result<EvalReport> {
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
    report_from_probs(&probs, labels)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "samples={} top1={:.6} loss={:.6}",
            self.samples, self.top1, self.loss
        )?;
        for (i, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => writeln!(f, "class {i}: acc={a:.6}")?,
                None => writeln!(f, "class {i}: acc=-")?,
            }
        }
        writeln!(f, "confusion (rows true, columns predicted):")?;
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(f, "  {}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Per-sample logits of one stream, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub logits: Vec<Vec<f64>>,
}

impl ScoreFile {
    pub fn num_classes(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    pub fn report(&self) -> Result<EvalReport> {
        report_from_logits(&self.logits, &self.labels)
    }

    /// Tab-separated: header `sample_id label logit_0 ..`, one row per
    /// sample; values print in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::from("sample_id\tlabel");
        for k in 0..self.num_classes() {
            s.push_str(&format!("\tlogit_{k}"));
        }
        s.push('\n');
        for ((id, y), l) in self.ids.iter().zip(&self.labels).zip(&self.logits) {
            s.push_str(id);
            s.push('\t');
            s.push_str(&y.to_string());
            for x in l {
                s.push('\t');
                s.push_str(&x.to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::format("empty score file"))?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 3 || cols[0] != "sample_id" || cols[1] != "label" {
            return Err(Error::format(
                "score file header must be `sample_id label logit_0 ..`",
            ));
        }
        let k = cols.len() - 2;
        let mut out = ScoreFile {
            ids: Vec::new(),
            labels: Vec::new(),
            logits: Vec::new(),
        };
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != k + 2 {
                return Err(Error::format(format!(
                    "score line {}: expected {} columns, found {}",
                    n + 1,
                    k + 2,
                    f.len()
                )));
            }
            let bad = |what: &str, v: &str| {
                Error::format(format!("score line {}: bad {what} `{v}`", n + 1))
            };
            out.ids.push(f[0].to_string());
            out.labels
                .push(f[1].parse().map_err(|_| bad("label", f[1]))?);
            let row = f[2..]
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| bad("logit", v))
                })
                .collect::<Result<Vec<f64>>>()?;
            out.logits.push(row);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

// Pairwise summation keeps the mean of identical vectors exact for any
// power-of-two count.
fn pairwise_sum(rows: &[&[f64]]) -> Vec<f64> {
    match rows {
        [one] => one.to_vec(),
        _ => {
            let (a, b) = rows.split_at(rows.len() / 2);
            let (a, b) = (pairwise_sum(a), pairwise_sum(b));
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
    }
}

/// Average the per-sample softmax outputs of several streams.
pub fn fuse_streams(streams: &[ScoreFile]) -> Result<EvalReport> {
    let first = streams
        .first()
        .ok_or(Error::EmptyReduction("fuse needs at least one stream"))?;
    for (s, other) in streams.iter().enumerate().skip(1) {
        if other.ids.len() != first.ids.len() {
            return Err(Error::format(format!(
                "stream {s} has {} samples, stream 0 has {}",
                other.ids.len(),
                first.ids.len()
            )));
        }
        if other.num_classes() != first.num_classes() {
            return Err(Error::format(format!(
                "stream {s} has {} classes, stream 0 has {}",
                other.num_classes(),
                first.num_classes()
            )));
        }
        for (row, (a, b)) in first.ids.iter().zip(&other.ids).enumerate() {
            if a != b {
                return Err(Error::format(format!(
                    "sample id mismatch at row {}: `{a}` in stream 0, `{b}` in stream {s}",
                    row + 1
                )));
            }
        }
        if let Some(row) = (0..first.labels.len()).find(|&i| first.labels[i] != other.labels[i]) {
            return Err(Error::format(format!(
                "label mismatch for sample `{}` in stream {s}",
                first.ids[row]
            )));
        }
    }
    let n = streams.len() as f64;
    let probs: Vec<Vec<f64>> = (0..first.ids.len())
        .map(|i| {
            let ps: Vec<Vec<f64>> = streams.iter().map(|s| softmax(&s.logits[i])).collect();
            let refs: Vec<&[f64]> = ps.iter().map(Vec::as_slice).collect();
            pairwise_sum(&refs).into_iter().map(|x| x / n).collect()
        })
        .collect();
    report_from_probs(&probs, &first.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores() -> ScoreFile {
        ScoreFile {
            ids: vec!["a".into(), "b".into(), "c".into()],
            labels: vec![0, 1, 1],
            logits: vec![vec![2.0, -1.0], vec![0.1, 0.3], vec![1.0 / 3.0, 0.0]],
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let s = scores();
        assert_eq!(ScoreFile::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn confusion_trace_matches_accuracy() {
        let r = scores().report().unwrap();
        let trace: usize = (0..2).map(|i| r.confusion[i][i]).sum();
        assert_eq!(trace as f64 / 3.0, r.top1);
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.5)]);
        for (i, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), [1, 2][i]);
        }
    }

    #[test]
    fn fusing_copies_is_identity() {
        let s = scores();
        let single = fuse_streams(std::slice::from_ref(&s)).unwrap();
        assert_eq!(single, s.report().unwrap());
        for n in [2, 3, 4] {
            let fused = fuse_streams(&vec![s.clone(); n]).unwrap();
            assert_eq!(fused.top1, single.top1);
            assert_eq!(fused.confusion, single.confusion);
        }
        assert_eq!(fuse_streams(&vec![s.clone(); 4]).unwrap(), single);
    }

    #[test]
    fn mismatch_names_first_bad_id() {
        let a = scores();
        let mut b = scores();
        b.ids[1] = "z".into();
        let msg = fuse_streams(&[a, b]).unwrap_err().to_string();
        assert!(msg.contains("`b`") && msg.contains("`z`"), "{msg}");
    }

    #[test]
    fn uniform_stream_is_chance() {
        let s = ScoreFile {
            ids: (0..4).map(|i| i.to_string()).collect(),
            labels: vec![0, 1, 2, 3],
            logits: vec![vec![0.0; 4]; 4],
        };
        let r = s.report().unwrap();
        assert_eq!(r.top1, 0.25);
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
    }
}
