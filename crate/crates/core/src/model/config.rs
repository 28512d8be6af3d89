use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{epsilon_n_with_exponent, ModelParams, CONFORMING_EPS_EXPONENT};
use crate::{Error, Result};

/// Complete description of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub t_start: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub x0_init: f64,
    pub xbar_init: f64,
    pub minor_inits: Option<Vec<f64>>,
    pub model: ModelParams,
    pub eps_coeff: f64,
    pub eps_exponent: f64,
    pub nonconforming: bool,
    pub mc_outer: usize,
    pub mc_cloud: usize,
    pub quad_order: usize,
    pub grid_nodes: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            t_start: 0.0,
            t_end: 1.0,
            n_steps: 16,
            x0_init: 0.0,
            xbar_init: 0.0,
            minor_inits: None,
            model: ModelParams::default(),
            eps_coeff: 1.0,
            eps_exponent: CONFORMING_EPS_EXPONENT,
            nonconforming: false,
            mc_outer: 2000,
            mc_cloud: 256,
            quad_order: 40,
            grid_nodes: 201,
            seed: 20_240_917,
        }
    }
}

impl Scenario {
    pub fn horizon(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn step(&self) -> f64 {
        self.horizon() / self.n_steps as f64
    }

    /// `eps_N` under the configured schedule.
    pub fn eps_n(&self, n_minor: usize) -> f64 {
        epsilon_n_with_exponent(n_minor, self.eps_coeff, self.eps_exponent)
    }

    pub fn is_conforming(&self) -> bool {
        self.eps_exponent == CONFORMING_EPS_EXPONENT
    }

    /// Initial positions of the `n_minor` minors.
    pub fn minor_starts(&self, n_minor: usize) -> Result<Vec<f64>> {
        match &self.minor_inits {
            None => Ok(vec![self.xbar_init; n_minor]),
            Some(v) if v.len() == n_minor => Ok(v.clone()),
            Some(v) => Err(Error::Dimension(format!(
                "minor_inits has {} entries but N = {n_minor}",
                v.len()
            ))),
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Checks ranges and the saddle condition.
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("t_start", self.t_start),
            ("t_end", self.t_end),
            ("x0_init", self.x0_init),
            ("xbar_init", self.xbar_init),
            ("alpha", self.model.alpha),
            ("gamma", self.model.gamma),
            ("beta", self.model.beta),
            ("a_lin", self.model.a_lin),
            ("c_lin", self.model.c_lin),
            ("kappa_g", self.model.kappa_g),
            ("kappa_b0", self.model.kappa_b0),
            ("kappa_b1", self.model.kappa_b1),
            ("kappa_phi", self.model.kappa_phi),
            ("sigma_amp", self.model.sigma_amp),
            ("eps_coeff", self.eps_coeff),
            ("eps_exponent", self.eps_exponent),
        ];
        for (k, v) in finite {
            if !v.is_finite() {
                return Err(range(k, "must be finite"));
            }
        }
        if let Some(v) = &self.minor_inits {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(range("minor_inits", "entries must be finite"));
            }
        }
        if !(self.t_start < self.t_end) {
            return Err(range("t_end", "must exceed t_start"));
        }
        if self.n_steps == 0 {
            return Err(range("n_steps", "must be at least 1"));
        }
        if self.mc_outer < 2 {
            return Err(range("mc_outer", "must be at least 2"));
        }
        if self.mc_cloud < 2 {
            return Err(range("mc_cloud", "must be at least 2"));
        }
        if self.quad_order < 2 {
            return Err(range("quad_order", "must be at least 2"));
        }
        if self.grid_nodes < 5 {
            return Err(range("grid_nodes", "must be at least 5"));
        }
        if !(self.model.alpha > 0.0) {
            return Err(range("alpha", "must be positive"));
        }
        if !(self.model.gamma > 0.0) {
            return Err(range("gamma", "must be positive"));
        }
        if self.model.sigma_amp.abs() >= 1.0 {
            return Err(range("sigma_amp", "must lie in (-1, 1) to keep diffusions positive"));
        }
        if !(self.eps_coeff > 0.0) {
            return Err(range("eps_coeff", "must be positive"));
        }
        if !self.is_conforming() && !self.nonconforming {
            return Err(range(
                "eps_exponent",
                "only 0.75 is allowed unless nonconforming = true",
            ));
        }
        self.model.check_saddle_condition()
    }
}

fn range(key: &str, msg: &str) -> Error {
    Error::OutOfRange {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

/// Every accepted key with its section.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("time", "t_start"),
    ("time", "t_end"),
    ("time", "n_steps"),
    ("init", "x0_init"),
    ("init", "xbar_init"),
    ("init", "minor_inits"),
    ("model", "alpha"),
    ("model", "gamma"),
    ("model", "beta"),
    ("model", "a_lin"),
    ("model", "c_lin"),
    ("model", "kappa_g"),
    ("model", "kappa_b0"),
    ("model", "kappa_b1"),
    ("model", "kappa_phi"),
    ("model", "sigma_amp"),
    ("model", "eps_coeff"),
    ("model", "eps_exponent"),
    ("model", "nonconforming"),
    ("model", "state_dim"),
    ("model", "control_dim"),
    ("mc", "mc_outer"),
    ("mc", "mc_cloud"),
    ("mc", "quad_order"),
    ("mc", "grid_nodes"),
    ("seed", "seed"),
];

const REQUIRED: &[&str] = &["alpha", "gamma", "beta"];

/// Parses a scenario file.
pub fn load_scenario(config_text: &str) -> Result<Scenario> {
    load_scenario_with_overrides(config_text, &[])
}

/// Parses a scenario file, then applies `key=value` overrides on top.
///
/// Override keys may be bare (`alpha`) or qualified (`model.alpha`).
pub fn load_scenario_with_overrides(config_text: &str, overrides: &[String]) -> Result<Scenario> {
    let mut entries = parse_entries(config_text)?;
    for ov in overrides {
        let (key, value) = ov.split_once('=').ok_or_else(|| Error::OutOfRange {
            key: "override".into(),
            msg: format!("`{ov}` is not of the form key=value"),
        })?;
        let key = key.trim();
        let bare = match key.split_once('.') {
            Some((section, k)) => {
                if !CONFIG_KEYS.contains(&(section, k)) {
                    return Err(unknown_override(key));
                }
                k
            }
            None => key,
        };
        let canonical = CONFIG_KEYS
            .iter()
            .find(|(_, k)| *k == bare)
            .ok_or_else(|| unknown_override(key))?
            .1;
        entries.insert(canonical, (value.trim().to_string(), 0));
    }
    build(&entries)
}

fn unknown_override(key: &str) -> Error {
    Error::OutOfRange {
        key: "override".into(),
        msg: format!("unknown key `{key}`"),
    }
}

type Entries = BTreeMap<&'static str, (String, usize)>;

fn parse_entries(text: &str) -> Result<Entries> {
    let mut entries = Entries::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("malformed section header `{line}`"),
            })?;
            let name = name.trim();
            if !CONFIG_KEYS.iter().any(|(s, _)| *s == name) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown section `[{name}]`"),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected key = value, found `{line}`"),
        })?;
        let key = key.trim();
        let sec = section.as_deref().ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("key `{key}` appears before any section header"),
        })?;
        let canonical = CONFIG_KEYS
            .iter()
            .find(|(s, k)| *s == sec && *k == key)
            .ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("unknown key `{key}` in section [{sec}]"),
            })?
            .1;
        if entries.contains_key(canonical) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("duplicate key `{key}`"),
            });
        }
        entries.insert(canonical, (value.trim().to_string(), line_no));
    }
    Ok(entries)
}

fn parse_value<T: std::str::FromStr>(entries: &Entries, key: &str) -> Result<Option<T>> {
    match entries.get(key) {
        None => Ok(None),
        Some((text, line)) => text
            .parse::<T>()
            .map(Some)
            .map_err(|_| value_error(*line, format!("cannot parse `{text}` as a value for `{key}`"))),
    }
}

/// Line 0 marks a value that came from an override.
fn value_error(line: usize, msg: String) -> Error {
    match line {
        0 => Error::OutOfRange {
            key: "override".into(),
            msg,
        },
        _ => Error::Parse { line, msg },
    }
}

fn build(entries: &Entries) -> Result<Scenario> {
    for key in REQUIRED {
        if !entries.contains_key(key) {
            return Err(Error::MissingKey(key.to_string()));
        }
    }
    for dim_key in ["state_dim", "control_dim"] {
        if let Some(d) = parse_value::<usize>(entries, dim_key)? {
            if d != 1 {
                return Err(range(dim_key, "only dimension 1 is supported"));
            }
        }
    }

    let mut s = Scenario::default();
    macro_rules! set {
        ($key:literal, $($field:ident).+) => {
            if let Some(v) = parse_value(entries, $key)? {
                s.$($field).+ = v;
            }
        };
    }
    set!("t_start", t_start);
    set!("t_end", t_end);
    set!("n_steps", n_steps);
    set!("x0_init", x0_init);
    set!("xbar_init", xbar_init);
    set!("alpha", model.alpha);
    set!("gamma", model.gamma);
    set!("beta", model.beta);
    set!("a_lin", model.a_lin);
    set!("c_lin", model.c_lin);
    set!("kappa_g", model.kappa_g);
    set!("kappa_b0", model.kappa_b0);
    set!("kappa_b1", model.kappa_b1);
    set!("kappa_phi", model.kappa_phi);
    set!("sigma_amp", model.sigma_amp);
    set!("eps_coeff", eps_coeff);
    set!("eps_exponent", eps_exponent);
    set!("nonconforming", nonconforming);
    set!("mc_outer", mc_outer);
    set!("mc_cloud", mc_cloud);
    set!("quad_order", quad_order);
    set!("grid_nodes", grid_nodes);
    set!("seed", seed);

    if let Some((text, line)) = entries.get("minor_inits") {
        let values = text
            .split(',')
            .map(|p| p.trim())
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| value_error(*line, format!("cannot parse `{p}` in minor_inits")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(value_error(*line, "minor_inits is empty".into()));
        }
        s.minor_inits = Some(values);
    }
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nalpha = 2\ngamma = 2\nbeta = 1\n";

    #[test]
    fn minimal_config() {
        let s = load_scenario(MINIMAL).unwrap();
        assert_eq!(s.model.lambda_mod(), 2.0);
        assert_eq!(s.model.mu_mod(), 1.0);
        assert!(s.minor_inits.is_none());
        assert_eq!(s.minor_starts(3).unwrap(), vec![s.xbar_init; 3]);
    }

    #[test]
    fn rejects_mu_at_least_lambda() {
        let err = load_scenario("[model]\nalpha=2\ngamma=2\nbeta=3\n").unwrap_err();
        assert!(err.to_string().contains("mu >= lambda"), "{err}");
    }

    #[test]
    fn reports_line_of_bad_value() {
        let text = "[time]\nn_steps = 4\nt_end = x\n[model]\nalpha=2\ngamma=2\nbeta=0\n";
        match load_scenario(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_error() {
        let err = load_scenario("[model]\nalpha=2\ngamma=2\nbeta=0\nbogus=1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }));
        let err = load_scenario("[time]\nalpha=2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn missing_and_range_errors() {
        assert!(matches!(
            load_scenario("[model]\nalpha=2\ngamma=2\n"),
            Err(Error::MissingKey(k)) if k == "beta"
        ));
        let text = format!("[time]\nn_steps = 0\n{MINIMAL}");
        assert!(matches!(load_scenario(&text), Err(Error::OutOfRange { key, .. }) if key == "n_steps"));
        let text = format!("{MINIMAL}eps_exponent = 0.5\n");
        assert!(load_scenario(&text).is_err());
        let text = format!("{MINIMAL}eps_exponent = 0.5\nnonconforming = true\n");
        assert!(!load_scenario(&text).unwrap().is_conforming());
        let text = format!("{MINIMAL}state_dim = 2\n");
        assert!(load_scenario(&text).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let s = load_scenario_with_overrides(
            MINIMAL,
            &["model.beta=0.5".to_string(), "n_steps=8".to_string()],
        )
        .unwrap();
        assert_eq!(s.model.beta, 0.5);
        assert_eq!(s.n_steps, 8);
        assert!(load_scenario_with_overrides(MINIMAL, &["nope=1".to_string()]).is_err());
    }

    #[test]
    fn minor_inits_list() {
        let text = format!("[init]\nminor_inits = 0.1, 0.2,0.3\n{MINIMAL}");
        let s = load_scenario(&text).unwrap();
        assert_eq!(s.minor_starts(3).unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(s.minor_starts(4).is_err());
    }

    #[test]
    fn pure_and_digest_stable() {
        let a = load_scenario(MINIMAL).unwrap();
        let b = load_scenario(MINIMAL).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
