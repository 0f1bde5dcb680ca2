//! Flat, line-oriented configuration: `key = value` pairs under one level of
//! `[section]` headers, `#` comments, no nesting. Scenario schemas are
//! strict: every key must be consumed or the run is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    /// section -> key -> (value, line number)
    sections: BTreeMap<String, BTreeMap<String, (String, usize)>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, (String, usize)>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (idx, raw_line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {line_no}: unterminated section header"))
                })?;
                let name = name.trim();
                if name.is_empty() {
                    return Err(Error::Config(format!("line {line_no}: empty section name")));
                }
                sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line_no}: expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            let section = current.clone().ok_or_else(|| {
                Error::Config(format!(
                    "line {line_no}: key `{key}` appears before any [section] header"
                ))
            })?;
            let entry = sections.entry(section.clone()).or_default();
            if entry
                .insert(key.to_string(), (value.to_string(), line_no))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {line_no}: duplicate key `{key}` in section [{section}]"
                )));
            }
        }
        Ok(RawConfig { sections })
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    /// Strict reader over one section; missing sections read as empty.
    pub fn section(&self, name: &str) -> SectionReader<'_> {
        SectionReader {
            name: name.to_string(),
            entries: self.sections.get(name),
            consumed: BTreeSet::new(),
        }
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(|s| s.as_str())
    }

    /// Flat `section.key = value` echo for the run manifest.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (section, entries) in &self.sections {
            for (key, (value, _)) in entries {
                out.insert(format!("{section}.{key}"), value.clone());
            }
        }
        out
    }

    /// Replace (or insert) a value, used by the CLI overrides.
    pub fn set(&mut self, section: &str, key: &str, value: String) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), (value, 0));
    }

    /// Error if any section other than the listed ones is present.
    pub fn restrict_sections(&self, allowed: &[&str]) -> Result<()> {
        for name in self.sections.keys() {
            if !allowed.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown section [{name}]; expected one of {}",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }
}

pub struct SectionReader<'a> {
    name: String,
    entries: Option<&'a BTreeMap<String, (String, usize)>>,
    consumed: BTreeSet<String>,
}

impl SectionReader<'_> {
    fn raw(&mut self, key: &str) -> Option<String> {
        let value = self.entries.and_then(|m| m.get(key));
        if value.is_some() {
            self.consumed.insert(key.to_string());
        }
        value.map(|(v, _)| v.clone())
    }

    fn parse_error(&self, key: &str, value: &str, ty: &str) -> Error {
        Error::Config(format!(
            "[{}] {key} = `{value}` is not a valid {ty}",
            self.name
        ))
    }

    fn missing(&self, key: &str) -> Error {
        Error::Config(format!("[{}] missing required key `{key}`", self.name))
    }

    pub fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => {
                let parsed: f64 = v
                    .parse()
                    .map_err(|_| self.parse_error(key, &v, "number"))?;
                if !parsed.is_finite() {
                    return Err(self.parse_error(key, &v, "finite number"));
                }
                Ok(Some(parsed))
            }
        }
    }

    pub fn f64(&mut self, key: &str) -> Result<f64> {
        self.opt_f64(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    pub fn opt_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.parse_error(key, &v, "non-negative integer")),
        }
    }

    pub fn usize(&mut self, key: &str) -> Result<usize> {
        self.opt_usize(key)?.ok_or_else(|| self.missing(key))
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        Ok(self.opt_usize(key)?.unwrap_or(default))
    }

    pub fn opt_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.parse_error(key, &v, "unsigned integer")),
        }
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        Ok(self.opt_u64(key)?.unwrap_or(default))
    }

    pub fn opt_str(&mut self, key: &str) -> Option<String> {
        self.raw(key)
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.opt_str(key).unwrap_or_else(|| default.to_string())
    }

    pub fn str_required(&mut self, key: &str) -> Result<String> {
        self.opt_str(key).ok_or_else(|| self.missing(key))
    }

    /// Complex value given as `<base>_re` / `<base>_im` (imaginary part
    /// optional, defaulting to zero).
    pub fn complex(&mut self, base: &str, default_re: Option<f64>) -> Result<Complex64> {
        let re_key = format!("{base}_re");
        let im_key = format!("{base}_im");
        let re = match (self.opt_f64(&re_key)?, default_re) {
            (Some(v), _) => v,
            (None, Some(d)) => d,
            (None, None) => return Err(self.missing(&re_key)),
        };
        let im = self.f64_or(&im_key, 0.0)?;
        Ok(Complex64::new(re, im))
    }

    /// Every key in the section must have been consumed.
    pub fn finish(self) -> Result<()> {
        let Some(entries) = self.entries else {
            return Ok(());
        };
        let mut unknown = String::new();
        for (key, (_, line)) in entries {
            if !self.consumed.contains(key) {
                if !unknown.is_empty() {
                    unknown.push_str(", ");
                }
                let _ = write!(unknown, "`{key}` (line {line})");
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys in section [{}]: {unknown}",
                self.name
            )))
        }
    }
}
