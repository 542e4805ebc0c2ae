//! Flat key=value run configuration with a `[run]` section header.
//!
//! The format is deliberately line-oriented for diffability. Unknown keys,
//! unknown sections and duplicate keys are hard errors so typos cannot
//! silently change a scientific run. Missing keys (except `problem`) fall
//! back to the reference defaults: StM kernel, Q = 30, F = 20, learning rate
//! 1e-2, 1M iteration cap, stop threshold 1e-6, lambda_b = 500, grids of 400
//! (1D) or 200x200 (2D).

use gphm::kernels::KernelKind;
use std::fmt;
use std::path::PathBuf;

/// One solve's configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: String,
    /// Nodes per dimension; defaulted from the problem dimension if absent.
    pub grid_sizes: Option<Vec<usize>>,
    pub kernel: KernelKind,
    pub q: usize,
    pub f: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub lambda_b: f64,
    pub stop_threshold: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Off-grid evaluation refinement factor for 1D problems.
    pub eval_refinement: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: String::new(),
            grid_sizes: None,
            kernel: KernelKind::StM,
            q: 30,
            f: 20.0,
            learning_rate: 1e-2,
            max_iters: 1_000_000,
            lambda_b: 500.0,
            stop_threshold: 1e-6,
            seed: 0,
            output_dir: PathBuf::from("gphm_out"),
            eval_refinement: 10,
        }
    }
}

/// Configuration parse failure with position diagnostics.
#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| err(line, format!("field `{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut in_run = false;
        let mut seen: Vec<String> = Vec::new();
        let mut have_problem = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(section) = line.strip_prefix('[') {
                let name = section
                    .strip_suffix(']')
                    .ok_or_else(|| err(line_no, "unterminated section header"))?
                    .trim();
                if name != "run" {
                    return Err(err(line_no, format!("unknown section `[{name}]`")));
                }
                in_run = true;
                continue;
            }
            if !in_run {
                return Err(err(line_no, "keys must appear under the `[run]` section"));
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line_no, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(err(line_no, format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());
            match key {
                "problem" => {
                    cfg.problem = value.to_string();
                    have_problem = true;
                }
                "grid_sizes" => {
                    let sizes: Result<Vec<usize>, _> = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect();
                    cfg.grid_sizes = Some(sizes.map_err(|_| {
                        err(line_no, format!("field `grid_sizes`: bad integer list `{value}`"))
                    })?);
                }
                "kernel" => {
                    cfg.kernel = KernelKind::parse(value).map_err(|_| {
                        err(
                            line_no,
                            format!("field `kernel`: expected stm|gm|se|matern52, got `{value}`"),
                        )
                    })?;
                }
                "Q" => cfg.q = parse_num(line_no, key, value)?,
                "F" => cfg.f = parse_num(line_no, key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(line_no, key, value)?,
                "max_iters" => cfg.max_iters = parse_num(line_no, key, value)?,
                "lambda_b" => cfg.lambda_b = parse_num(line_no, key, value)?,
                "stop_threshold" => cfg.stop_threshold = parse_num(line_no, key, value)?,
                "seed" => cfg.seed = parse_num(line_no, key, value)?,
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "eval_refinement" => cfg.eval_refinement = parse_num(line_no, key, value)?,
                other => {
                    return Err(err(line_no, format!("unknown key `{other}`")));
                }
            }
        }
        if !have_problem {
            return Err(err(0, "missing required key `problem`"));
        }
        cfg.validate().map_err(|m| err(0, m))?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(0, format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), String> {
        if self.q < 1 {
            return Err("field `Q`: must be at least 1".into());
        }
        if !(self.f >= 0.0 && self.f.is_finite()) {
            return Err("field `F`: must be a finite non-negative frequency".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("field `learning_rate`: must be positive".into());
        }
        if self.max_iters == 0 {
            return Err("field `max_iters`: must be positive".into());
        }
        if !(self.lambda_b > 0.0) {
            return Err("field `lambda_b`: must be positive".into());
        }
        if !(self.stop_threshold > 0.0) {
            return Err("field `stop_threshold`: must be positive".into());
        }
        if self.eval_refinement < 1 {
            return Err("field `eval_refinement`: must be at least 1".into());
        }
        if let Some(sizes) = &self.grid_sizes {
            if sizes.is_empty() || sizes.iter().any(|&m| m < 4) {
                return Err("field `grid_sizes`: each dimension needs at least 4 nodes".into());
            }
        }
        Ok(())
    }

    /// Grid sizes, defaulted by problem dimension when unspecified.
    pub fn sizes_for_dim(&self, dim: usize) -> Vec<usize> {
        match &self.grid_sizes {
            Some(s) => s.clone(),
            None => match dim {
                1 => vec![400],
                _ => vec![200; dim],
            },
        }
    }
}
