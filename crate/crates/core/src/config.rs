//! `key = value` configuration files and the tracker's scenario settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_err, Error, Result};

/// Parsed `key = value` text. `#` starts a comment line; keys are
/// case-sensitive; a repeated key keeps its last value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("bad value {v:?} for {key}"))),
        }
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad list element {s:?} for {key}"))))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Errors on the first key not present in any of `known`.
    pub fn check_known(&self, known: &[&[&str]]) -> Result<()> {
        for k in self.entries.keys() {
            if !known.iter().any(|set| set.contains(&k.as_str())) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        Ok(())
    }
}

/// Converts seconds to whole frames, rounding half up.
pub fn seconds_to_frames(seconds: f64, fps: u32) -> u64 {
    (seconds * fps as f64 + 0.5).floor().max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub fps: u32,
    pub camera_count: u32,
    pub window_tracklet_s: f64,
    pub window_sc_s: f64,
    pub window_mc_s: f64,
    pub overlap_fraction: f64,
    pub alpha: f64,
    pub beta: f64,
    pub t_m: f64,
    pub t_a: f64,
    pub margin: f64,
    pub p: usize,
    pub k: usize,
    pub h: usize,
    /// Frames; `None` means `fps / 2`.
    pub pruning_min_length: Option<u64>,
    pub speed_limit: f64,
    pub exact_limit: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            fps: 60,
            camera_count: 4,
            window_tracklet_s: 1.0,
            window_sc_s: 10.0,
            window_mc_s: 90.0,
            overlap_fraction: 0.5,
            alpha: 0.005,
            beta: 0.1,
            t_m: 4.0,
            t_a: 0.7,
            margin: 1.0,
            p: 18,
            k: 4,
            h: 50,
            pruning_min_length: None,
            speed_limit: 7.0,
            exact_limit: 12,
        }
    }
}

impl ScenarioConfig {
    pub const KEYS: &'static [&'static str] = &[
        "fps",
        "camera_count",
        "window_tracklet_s",
        "window_sc_s",
        "window_mc_s",
        "overlap_fraction",
        "alpha",
        "beta",
        "t_m",
        "t_a",
        "margin",
        "p",
        "k",
        "h",
        "pruning_min_length",
        "speed_limit",
        "exact_limit",
    ];

    /// Defaults overridden by whichever keys `kv` carries.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($($field:ident),*) => {
                $( if let Some(v) = kv.get(stringify!($field))? { c.$field = v; } )*
            };
        }
        take!(
            fps,
            camera_count,
            window_tracklet_s,
            window_sc_s,
            window_mc_s,
            overlap_fraction,
            alpha,
            beta,
            t_m,
            t_a,
            margin,
            p,
            k,
            h,
            speed_limit,
            exact_limit
        );
        if let Some(v) = kv.get("pruning_min_length")? {
            c.pruning_min_length = Some(v);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let c = self;
        let pairs: [(&str, String); 16] = [
            ("fps", c.fps.to_string()),
            ("camera_count", c.camera_count.to_string()),
            ("window_tracklet_s", c.window_tracklet_s.to_string()),
            ("window_sc_s", c.window_sc_s.to_string()),
            ("window_mc_s", c.window_mc_s.to_string()),
            ("overlap_fraction", c.overlap_fraction.to_string()),
            ("alpha", c.alpha.to_string()),
            ("beta", c.beta.to_string()),
            ("t_m", c.t_m.to_string()),
            ("t_a", c.t_a.to_string()),
            ("margin", c.margin.to_string()),
            ("p", c.p.to_string()),
            ("k", c.k.to_string()),
            ("h", c.h.to_string()),
            ("speed_limit", c.speed_limit.to_string()),
            ("exact_limit", c.exact_limit.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").unwrap();
        }
        if let Some(p) = c.pruning_min_length {
            writeln!(s, "pruning_min_length = {p}").unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.fps == 0 || self.camera_count == 0 {
            return fail("fps and camera_count must be positive");
        }
        if !(self.window_tracklet_s > 0.0 && self.window_tracklet_s <= self.window_sc_s && self.window_sc_s <= self.window_mc_s) {
            return fail("need 0 < window_tracklet_s <= window_sc_s <= window_mc_s");
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return fail("overlap_fraction must lie in [0, 1)");
        }
        if !(self.t_a > 0.0 && self.t_m > 0.0 && self.alpha > 0.0 && self.beta >= 0.0) {
            return fail("need t_a > 0, t_m > 0, alpha > 0, beta >= 0");
        }
        if !(self.speed_limit > 0.0) {
            return fail("speed_limit must be positive");
        }
        if self.margin < 0.0 || self.p == 0 || self.k == 0 || self.h == 0 {
            return fail("need margin >= 0 and positive p, k, h");
        }
        Ok(())
    }

    pub fn min_length(&self) -> u64 {
        self.pruning_min_length.unwrap_or(self.fps as u64 / 2)
    }

    pub fn frames(&self, seconds: f64) -> u64 {
        seconds_to_frames(seconds, self.fps)
    }
}
