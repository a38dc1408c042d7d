//! Plain-text checkpoint of an online/target pair.
//!
//! ```text
//! OPERA-CKPT v1
//! arrangement C
//! momentum 9.9000000000000002e-1
//! stack online.backbone 2
//! layer relu nobias bn 1.0000000000000001e-5 1.0000000000000001e-1
//! tensor online.backbone.0.weight 2 64 32
//! <64 * 32 values, space separated>
//! ...
//! end
//! ```
//!
//! Stacks appear in the order online backbone, projector, predictor, class
//! head, then target backbone and projector. Each `layer` line is followed
//! by its tensors: weight, bias when present, then batch-norm scale,
//! shift, running mean and running variance. Values use 17 significant
//! digits, so a load/save cycle reproduces the file exactly.

use std::fmt::Write as _;
use std::path::Path;

use opera_core::model::{
    Activation, Arrangement, BatchNorm, HierarchyModel, MlpLayer, OnlineTargetPair, Stack, TargetNetwork,
};
use opera_core::Matrix;

use crate::error::{CliError, CliResult};

pub const HEADER: &str = "OPERA-CKPT v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_tensor(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "tensor {name} 2 {} {}", m.rows(), m.cols());
    let values: Vec<String> = m.as_slice().iter().map(|&v| fmt_f64(v)).collect();
    let _ = writeln!(out, "{}", values.join(" "));
}

fn write_stack(out: &mut String, name: &str, stack: &Stack) {
    let _ = writeln!(out, "stack {name} {}", stack.layers.len());
    for (i, layer) in stack.layers.iter().enumerate() {
        let act = match layer.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        let bias = if layer.bias.is_some() { "bias" } else { "nobias" };
        match &layer.norm {
            Some(bn) => {
                let _ = writeln!(out, "layer {act} {bias} bn {} {}", fmt_f64(bn.eps), fmt_f64(bn.momentum));
            }
            None => {
                let _ = writeln!(out, "layer {act} {bias} nobn");
            }
        }
        let prefix = format!("{name}.{i}");
        write_tensor(out, &format!("{prefix}.weight"), &layer.weight);
        if let Some(b) = &layer.bias {
            write_tensor(out, &format!("{prefix}.bias"), b);
        }
        if let Some(bn) = &layer.norm {
            write_tensor(out, &format!("{prefix}.bn.scale"), &bn.scale);
            write_tensor(out, &format!("{prefix}.bn.shift"), &bn.shift);
            write_tensor(out, &format!("{prefix}.bn.running_mean"), &bn.running_mean);
            write_tensor(out, &format!("{prefix}.bn.running_var"), &bn.running_var);
        }
    }
}

pub fn to_text(pair: &OnlineTargetPair) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "arrangement {}", pair.online.arrangement().as_str());
    let _ = writeln!(out, "momentum {}", fmt_f64(pair.momentum()));
    write_stack(&mut out, "online.backbone", &pair.online.backbone);
    write_stack(&mut out, "online.projector", &pair.online.projector);
    write_stack(&mut out, "online.predictor", &pair.online.predictor);
    write_stack(&mut out, "online.class_head", &pair.online.class_head);
    write_stack(&mut out, "target.backbone", &pair.target.backbone);
    write_stack(&mut out, "target.projector", &pair.target.projector);
    out.push_str("end\n");
    out
}

pub fn save(pair: &OnlineTargetPair, path: &Path) -> CliResult<()> {
    std::fs::write(path, to_text(pair)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<OnlineTargetPair> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, path)
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
    origin: &'a Path,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> CliError {
        CliError::Parse {
            path: self.origin.to_path_buf(),
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self) -> CliResult<&'a str> {
        match self.iter.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of file"))
            }
        }
    }

    /// Next line split into words, checking the leading keyword.
    fn keyword(&mut self, word: &str) -> CliResult<Vec<&'a str>> {
        let l = self.next()?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        if parts.first() != Some(&word) {
            return Err(self.err(format!("expected `{word}` line, found `{l}`")));
        }
        Ok(parts[1..].to_vec())
    }

    fn number<T: std::str::FromStr>(&self, s: &str) -> CliResult<T> {
        s.parse().map_err(|_| self.err(format!("cannot parse `{s}`")))
    }

    fn tensor(&mut self, name: &str) -> CliResult<Matrix> {
        let head = self.keyword("tensor")?;
        if head.first() != Some(&name) {
            return Err(self.err(format!("expected tensor `{name}`, found `{}`", head.join(" "))));
        }
        if head.len() != 4 || head[1] != "2" {
            return Err(self.err("tensor header must be `tensor <name> 2 <rows> <cols>`"));
        }
        let rows: usize = self.number(head[2])?;
        let cols: usize = self.number(head[3])?;
        let line = self.next()?;
        let values = line
            .split_whitespace()
            .map(|v| self.number::<f64>(v))
            .collect::<CliResult<Vec<f64>>>()?;
        if values.len() != rows * cols {
            return Err(self.err(format!(
                "tensor `{name}` has {} values, expected {}",
                values.len(),
                rows * cols
            )));
        }
        Matrix::from_vec(rows, cols, values).map_err(|e| self.err(e.to_string()))
    }

    fn stack(&mut self, name: &str) -> CliResult<Stack> {
        let head = self.keyword("stack")?;
        if head.len() != 2 || head[0] != name {
            return Err(self.err(format!("expected `stack {name} <layers>`")));
        }
        let n: usize = self.number(head[1])?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let spec = self.keyword("layer")?;
            let activation = match spec.first() {
                Some(&"relu") => Activation::Relu,
                Some(&"identity") => Activation::Identity,
                _ => return Err(self.err("layer activation must be relu or identity")),
            };
            let has_bias = match spec.get(1) {
                Some(&"bias") => true,
                Some(&"nobias") => false,
                _ => return Err(self.err("layer bias flag must be bias or nobias")),
            };
            let bn_params = match spec.get(2..) {
                Some(["bn", eps, momentum]) => Some((self.number::<f64>(eps)?, self.number::<f64>(momentum)?)),
                Some(["nobn"]) => None,
                _ => return Err(self.err("layer norm must be `bn <eps> <momentum>` or `nobn`")),
            };
            let prefix = format!("{name}.{i}");
            let weight = self.tensor(&format!("{prefix}.weight"))?;
            let bias = if has_bias { Some(self.tensor(&format!("{prefix}.bias"))?) } else { None };
            let norm = match bn_params {
                Some((eps, momentum)) => Some(BatchNorm {
                    scale: self.tensor(&format!("{prefix}.bn.scale"))?,
                    shift: self.tensor(&format!("{prefix}.bn.shift"))?,
                    running_mean: self.tensor(&format!("{prefix}.bn.running_mean"))?,
                    running_var: self.tensor(&format!("{prefix}.bn.running_var"))?,
                    eps,
                    momentum,
                }),
                None => None,
            };
            let width = weight.rows();
            let vectors = bias.iter().chain(norm.iter().flat_map(|bn| {
                [&bn.scale, &bn.shift, &bn.running_mean, &bn.running_var]
            }));
            if vectors.into_iter().any(|v| v.shape() != (1, width)) {
                return Err(self.err(format!("vectors of layer {prefix} must be 1 x {width}")));
            }
            layers.push(MlpLayer {
                weight,
                bias,
                norm,
                activation,
            });
        }
        Stack::new(layers).map_err(|e| self.err(e.to_string()))
    }
}

/// `origin` only labels error messages.
pub fn parse(text: &str, origin: &Path) -> CliResult<OnlineTargetPair> {
    let mut lines = Lines {
        iter: text.lines().enumerate(),
        line: 0,
        origin,
    };
    let first = lines.next()?;
    if first != HEADER {
        return Err(lines.err(format!("expected header `{HEADER}`, found `{first}`")));
    }
    let arr = lines.keyword("arrangement")?;
    let arrangement: Arrangement = arr
        .first()
        .ok_or_else(|| lines.err("missing arrangement"))?
        .parse()
        .map_err(|e: opera_core::Error| lines.err(e.to_string()))?;
    let m = lines.keyword("momentum")?;
    let momentum: f64 = lines.number(m.first().copied().unwrap_or(""))?;
    let backbone = lines.stack("online.backbone")?;
    let projector = lines.stack("online.projector")?;
    let predictor = lines.stack("online.predictor")?;
    let class_head = lines.stack("online.class_head")?;
    let target = TargetNetwork {
        backbone: lines.stack("target.backbone")?,
        projector: lines.stack("target.projector")?,
    };
    lines.keyword("end")?;
    let online = HierarchyModel::from_parts(backbone, projector, predictor, class_head, arrangement)
        .map_err(|e| lines.err(e.to_string()))?;
    OnlineTargetPair::from_parts(online, target, momentum).map_err(|e| lines.err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use opera_core::model::{Mode, ModelConfig};
    use opera_core::Rng;

    fn pair() -> OnlineTargetPair {
        let mut rng = Rng::new(3);
        let mut m = HierarchyModel::new(&ModelConfig::desk(5, 3, Arrangement::B), &mut rng).unwrap();
        m.forward(&rng.gaussian_matrix(8, 5, 1.0), Mode::Train).unwrap();
        OnlineTargetPair::new(m, 0.99).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = pair();
        let text = to_text(&p);
        let back = parse(&text, Path::new("x")).unwrap();
        assert_eq!(back, p);
        assert_eq!(to_text(&back), text);
    }

    #[test]
    fn truncation_reports_position() {
        let text = to_text(&pair());
        let cut: String = text.lines().take(9).map(|l| format!("{l}\n")).collect();
        match parse(&cut, Path::new("x")) {
            Err(CliError::Parse { line, message, .. }) => {
                assert_eq!(line, 10);
                assert!(message.contains("end of file"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_header() {
        assert!(matches!(parse("OPERA-CKPT v2\n", Path::new("x")), Err(CliError::Parse { line: 1, .. })));
    }

    #[test]
    fn wrong_value_count() {
        let text = to_text(&pair());
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[5].push_str(" 1.0");
        let broken = lines.join("\n");
        assert!(matches!(parse(&broken, Path::new("x")), Err(CliError::Parse { line: 6, .. })));
    }
}
