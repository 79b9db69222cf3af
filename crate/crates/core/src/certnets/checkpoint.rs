//! Line-oriented text serialization for [`CertificateCheckpoint`].
//!
//! ```text
//! version = 1
//! system = pvtol
//! revision = 0
//! [hyperparams]
//! lambda = 5.0000000000000000e-1
//! ...
//! [selector]
//! label = training
//! c = <rows> <cols> : v v v ...
//! d = <rows> <cols> : v v v ...
//! [theta_w]
//! w1 = <rows> <cols> : v v v ...
//! [theta_u1]
//! [theta_u2]
//! [gains]
//! [tube positions]
//! [history]
//! step epoch loss alpha risk_c1 risk_c2 risk_c3 risk_c4
//! [end]
//! ```
//!
//! Reals are written with 17 significant digits, which round-trips `f64` exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use super::{
    CertificateCheckpoint, ControllerNet, GainParams, HistoryRow, Hyperparams, MetricNet, Mlp2,
    TubeEntry,
};
use crate::autodiff::ParamVector;
use crate::error::{Error, Result};
use crate::systems::OutputSelector;

pub const CHECKPOINT_VERSION: u32 = 1;

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_matrix(
    out: &mut String,
    key: &str,
    rows: usize,
    cols: usize,
    vals: impl Iterator<Item = f64>,
) {
    let _ = write!(out, "{key} = {rows} {cols} :");
    for v in vals {
        let _ = write!(out, " {}", real(v));
    }
    out.push('\n');
}

fn write_dmatrix(out: &mut String, key: &str, m: &DMatrix<f64>) {
    let (r, c) = (m.nrows(), m.ncols());
    write_matrix(
        out,
        key,
        r,
        c,
        (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])),
    );
}

fn write_selector(out: &mut String, sel: &OutputSelector) {
    let _ = writeln!(out, "label = {}", sel.label);
    write_dmatrix(out, "c", &sel.c);
    write_dmatrix(out, "d", &sel.d);
}

fn write_params(out: &mut String, section: &str, p: &ParamVector) {
    let _ = writeln!(out, "[{section}]");
    for (name, rows, cols, vals) in p.unpack() {
        write_matrix(out, &name, rows, cols, vals.into_iter());
    }
}

/// Serializes a checkpoint to its text form.
pub fn to_text(ck: &CertificateCheckpoint) -> String {
    let mut out = String::new();
    let h = &ck.hyper;
    let _ = writeln!(out, "version = {CHECKPOINT_VERSION}");
    let _ = writeln!(out, "system = {}", ck.system);
    let _ = writeln!(out, "revision = {}", ck.revision);
    out.push_str("[hyperparams]\n");
    let _ = writeln!(out, "lambda = {}", real(h.lambda));
    let _ = writeln!(out, "w_floor = {}", real(h.w_floor));
    let _ = writeln!(out, "hidden = {}", h.hidden);
    let _ = writeln!(out, "c = {}", h.c);
    let _ = writeln!(out, "seed = {}", h.seed);
    let _ = writeln!(out, "sigma = {}", real(h.sigma));
    let _ = writeln!(out, "ccm_lie_sign = {}", h.lie_sign);
    let _ = writeln!(out, "quad_drift_convention = {}", h.quad_drift);
    let inputs: Vec<String> = ck.metric.inputs().iter().map(|i| i.to_string()).collect();
    let _ = writeln!(out, "net_inputs = {}", inputs.join(" "));
    out.push_str("[selector]\n");
    write_selector(&mut out, &ck.selector);
    write_params(&mut out, "theta_w", ck.metric.net.params());
    write_params(&mut out, "theta_u1", ck.controller.phi1.params());
    write_params(&mut out, "theta_u2", ck.controller.phi2.params());
    out.push_str("[gains]\n");
    let _ = writeln!(out, "raw_a = {}", real(ck.gains.raw_a));
    let _ = writeln!(out, "raw_b = {}", real(ck.gains.raw_b));
    let _ = writeln!(out, "alpha = {}", real(ck.gains.alpha()));
    let _ = writeln!(out, "mu = {}", real(ck.gains.mu()));
    for (label, t) in &ck.tubes {
        let _ = writeln!(out, "[tube {label}]");
        let _ = writeln!(out, "alpha = {}", real(t.alpha));
        let _ = writeln!(out, "mu = {}", real(t.mu));
        let _ = writeln!(out, "penalty = {}", real(t.penalty));
        let _ = writeln!(out, "certified = {}", t.certified);
        write_selector(&mut out, &t.selector);
    }
    out.push_str("[history]\n");
    out.push_str("step epoch loss alpha risk_c1 risk_c2 risk_c3 risk_c4\n");
    for r in &ck.history {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            r.step,
            r.epoch,
            real(r.loss),
            real(r.alpha),
            real(r.risk_c1),
            real(r.risk_c2),
            real(r.risk_c3),
            real(r.risk_c4)
        );
    }
    out.push_str("[end]\n");
    out
}

pub fn save_checkpoint(ck: &CertificateCheckpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CertificateCheckpoint> {
    from_text(&std::fs::read_to_string(path)?)
}

struct Entry {
    line: usize,
    value: String,
}

#[derive(Default)]
struct Section {
    line: usize,
    keys: Vec<(String, Entry)>,
    rows: Vec<(usize, String)>,
}

impl Section {
    fn get(&self, key: &str) -> Result<&Entry> {
        self.keys
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, e)| e)
            .ok_or_else(|| parse_err(self.line, format!("missing key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let e = self.get(key)?;
        e.value
            .parse()
            .map_err(|err| parse_err(e.line, format!("bad value for {key}: {err}")))
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_matrix(e: &Entry) -> Result<(usize, usize, Vec<f64>)> {
    let (head, body) = e
        .value
        .split_once(':')
        .ok_or_else(|| parse_err(e.line, "matrix value needs 'rows cols : values'"))?;
    let dims: Vec<usize> = head
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(e.line, format!("bad dimension {t:?}")))
        })
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(parse_err(e.line, "matrix header needs two dimensions"));
    };
    let vals: Vec<f64> = body
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| parse_err(e.line, format!("bad number {t:?}")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != rows * cols {
        return Err(parse_err(
            e.line,
            format!("expected {} values, found {}", rows * cols, vals.len()),
        ));
    }
    Ok((rows, cols, vals))
}

fn parse_selector(sec: &Section) -> Result<OutputSelector> {
    let label = sec.get("label")?.value.clone();
    let (cr, cc, cv) = parse_matrix(sec.get("c")?)?;
    let (dr, dc, dv) = parse_matrix(sec.get("d")?)?;
    if cr != dr {
        return Err(parse_err(sec.line, "selector C and D row counts differ"));
    }
    OutputSelector::new(
        label,
        DMatrix::from_row_slice(cr, cc, &cv),
        DMatrix::from_row_slice(dr, dc, &dv),
    )
    .map_err(|e| parse_err(sec.line, e.to_string()))
}

fn parse_net(sec: &Section) -> Result<Mlp2> {
    let tensors = sec
        .keys
        .iter()
        .map(|(k, e)| parse_matrix(e).map(|(r, c, v)| (k.clone(), r, c, v)))
        .collect::<Result<Vec<_>>>()?;
    let pv = ParamVector::pack(tensors).map_err(|e| parse_err(sec.line, e.to_string()))?;
    Mlp2::from_params(pv).map_err(|e| parse_err(sec.line, e.to_string()))
}

/// Parses the text form; rejects truncated or malformed input without partial state.
pub fn from_text(text: &str) -> Result<CertificateCheckpoint> {
    let mut header = Section {
        line: 1,
        ..Default::default()
    };
    let mut sections: Vec<(String, Section)> = Vec::new();
    let mut ended = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if ended {
            return Err(parse_err(line, "content after [end]"));
        }
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            if name == "end" {
                ended = true;
                continue;
            }
            if sections.iter().any(|(n, _)| n == name) {
                return Err(parse_err(line, format!("duplicate section [{name}]")));
            }
            sections.push((
                name.to_string(),
                Section {
                    line,
                    ..Default::default()
                },
            ));
            continue;
        }
        let in_history = sections.last().is_some_and(|(n, _)| n == "history");
        let target = match sections.last_mut() {
            Some((_, s)) => s,
            None => &mut header,
        };
        if in_history {
            target.rows.push((line, t.to_string()));
        } else if let Some((k, v)) = t.split_once('=') {
            let key = k.trim().to_string();
            if target.keys.iter().any(|(existing, _)| *existing == key) {
                return Err(parse_err(line, format!("duplicate key {key:?}")));
            }
            target.keys.push((
                key,
                Entry {
                    line,
                    value: v.trim().to_string(),
                },
            ));
        } else {
            return Err(parse_err(
                line,
                format!("expected 'key = value', found {t:?}"),
            ));
        }
    }
    if !ended {
        return Err(parse_err(
            text.lines().count(),
            "missing [end] marker (truncated file)",
        ));
    }

    let version: u32 = header.parse("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let system = header.get("system")?.value.clone();
    let revision: u64 = header.parse("revision")?;

    let map: HashMap<&str, &Section> = sections.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let need = |name: &str| {
        map.get(name)
            .copied()
            .ok_or_else(|| parse_err(text.lines().count(), format!("missing section [{name}]")))
    };

    let hs = need("hyperparams")?;
    let hyper = Hyperparams {
        lambda: hs.parse("lambda")?,
        w_floor: hs.parse("w_floor")?,
        hidden: hs.parse("hidden")?,
        c: hs.parse("c")?,
        seed: hs.parse("seed")?,
        sigma: hs.parse("sigma")?,
        lie_sign: hs.parse("ccm_lie_sign")?,
        quad_drift: hs.parse("quad_drift_convention")?,
    };
    let selector = parse_selector(need("selector")?)?;
    let n = selector.c.ncols();
    let m = selector.d.ncols();
    let inputs: Vec<usize> = match hs.keys.iter().find(|(k, _)| k == "net_inputs") {
        None => (0..n).collect(),
        Some((_, e)) => e
            .value
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| parse_err(e.line, format!("bad net input {t:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let wnet = parse_net(need("theta_w")?)?;
    let metric = MetricNet::masked(wnet, n, inputs.clone(), hyper.w_floor)
        .map_err(|e| parse_err(need("theta_w").map(|s| s.line).unwrap_or(0), e.to_string()))?;
    let u1 = parse_net(need("theta_u1")?)?;
    let u2 = parse_net(need("theta_u2")?)?;
    let u_line = need("theta_u1")?.line;
    let controller = ControllerNet::masked(u1, u2, n, m, inputs)
        .map_err(|e| parse_err(u_line, e.to_string()))?;

    let gs = need("gains")?;
    let gains = GainParams {
        raw_a: gs.parse("raw_a")?,
        raw_b: gs.parse("raw_b")?,
    };
    for (key, derived) in [("alpha", gains.alpha()), ("mu", gains.mu())] {
        let saved: f64 = gs.parse(key)?;
        if (saved - derived).abs() > 1e-12 * (1.0 + derived.abs()) {
            return Err(parse_err(
                gs.get(key)?.line,
                format!("{key} = {saved} disagrees with value {derived} derived from raw gains"),
            ));
        }
    }

    let mut tubes = BTreeMap::new();
    for (name, sec) in &sections {
        if let Some(label) = name.strip_prefix("tube ") {
            let certified = match sec.get("certified")?.value.as_str() {
                "true" => true,
                "false" => false,
                other => {
                    return Err(parse_err(
                        sec.get("certified")?.line,
                        format!("certified must be true or false, got {other:?}"),
                    ))
                }
            };
            tubes.insert(
                label.to_string(),
                TubeEntry {
                    selector: parse_selector(sec)?,
                    alpha: sec.parse("alpha")?,
                    mu: sec.parse("mu")?,
                    penalty: sec.parse("penalty")?,
                    certified,
                },
            );
        } else if !matches!(
            name.as_str(),
            "hyperparams" | "selector" | "theta_w" | "theta_u1" | "theta_u2" | "gains" | "history"
        ) {
            return Err(parse_err(sec.line, format!("unknown section [{name}]")));
        }
    }

    let hist = need("history")?;
    let mut history = Vec::new();
    for (i, (line, row)) in hist.rows.iter().enumerate() {
        if i == 0 {
            if row.split_whitespace().next() != Some("step") {
                return Err(parse_err(*line, "history header row missing"));
            }
            continue;
        }
        let f: Vec<&str> = row.split_whitespace().collect();
        if f.len() != 8 {
            return Err(parse_err(
                *line,
                format!("history row needs 8 fields, found {}", f.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse()
                .map_err(|_| parse_err(*line, format!("bad number {:?}", f[k])))
        };
        let int = |k: usize| -> Result<usize> {
            f[k].parse()
                .map_err(|_| parse_err(*line, format!("bad integer {:?}", f[k])))
        };
        history.push(HistoryRow {
            step: int(0)?,
            epoch: int(1)?,
            loss: num(2)?,
            alpha: num(3)?,
            risk_c1: num(4)?,
            risk_c2: num(5)?,
            risk_c3: num(6)?,
            risk_c4: num(7)?,
        });
    }

    Ok(CertificateCheckpoint {
        system,
        revision,
        hyper,
        selector,
        metric,
        controller,
        gains,
        tubes,
        history,
    })
}
