//! Line-oriented run configuration: `section.key = value` per line, `#`
//! comments, unknown keys rejected with their line number.

use anyhow::{bail, Context, Result};
use genhybr::SolverVariant;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Heat,
    Seismic,
    Superres,
}

impl ProblemKind {
    pub fn label(self) -> &'static str {
        match self {
            ProblemKind::Heat => "heat",
            ProblemKind::Seismic => "seismic",
            ProblemKind::Superres => "superres",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Unknown count for the heat problem.
    pub n: usize,
    /// Grid side for the seismic problem.
    pub n_side: usize,
    pub n_sou: usize,
    pub n_rec: usize,
    /// High-resolution side for the super-resolution problem.
    pub hi_side: usize,
    pub frames: usize,
    pub lo_factor: usize,
    pub noise: f64,
    pub seed: u64,
    /// Constant solver-side mean; defaults to the truth-generation mean for
    /// seismic and zero otherwise.
    pub mu: Option<f64>,
    pub kl_theta: f64,
    pub kl_length: f64,
    pub kl_mean: f64,
    pub kl_modes: usize,
}

impl ProblemConfig {
    pub fn effective_mu(&self) -> f64 {
        self.mu.unwrap_or(match self.kind {
            ProblemKind::Seismic => self.kl_mean,
            _ => 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorConfig {
    Identity,
    Matern { nu: f64, alpha: f64 },
    GammaExponential { gamma: f64, alpha: f64 },
    Gaussian { alpha: f64 },
}

impl PriorConfig {
    pub fn describe(&self) -> String {
        match self {
            PriorConfig::Identity => "identity".into(),
            PriorConfig::Matern { nu, alpha } => format!("matern nu={nu} alpha={alpha}"),
            PriorConfig::GammaExponential { gamma, alpha } => {
                format!("gamma_exp gamma={gamma} alpha={alpha}")
            }
            PriorConfig::Gaussian { alpha } => format!("gaussian alpha={alpha}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RuleConfig {
    Fixed(f64),
    Optimal,
    Gcv,
    /// `None` keeps the library default weight.
    Wgcv(Option<f64>),
    Dp {
        tau: f64,
    },
    /// `None` estimates the noise variance from the realized noise.
    Upre(Option<f64>),
}

impl RuleConfig {
    fn describe(&self) -> String {
        match self {
            RuleConfig::Fixed(lambda) => format!("fixed:{lambda}"),
            RuleConfig::Optimal => "optimal".into(),
            RuleConfig::Gcv => "gcv".into(),
            RuleConfig::Wgcv(None) => "wgcv".into(),
            RuleConfig::Wgcv(Some(omega)) => format!("wgcv:{omega}"),
            RuleConfig::Dp { tau } => format!("dp:{tau}"),
            RuleConfig::Upre(None) => "upre".into(),
            RuleConfig::Upre(Some(eta2)) => format!("upre:{eta2}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub name: String,
    pub variant: SolverVariant,
    pub rule: RuleConfig,
    pub max_iter: usize,
    pub gcv_window: usize,
    pub gcv_flat_tol: f64,
    pub residual_tol: Option<f64>,
    pub reorth: bool,
    /// Overrides the global prior when set.
    pub prior: Option<PriorConfig>,
}

#[derive(Debug, Clone, Copy)]
pub struct EmitConfig {
    pub history_csv: bool,
    pub picard_csv: bool,
    pub images: bool,
    pub diagnostics: bool,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub prior: PriorConfig,
    pub solvers: Vec<SolverConfig>,
    pub output_dir: PathBuf,
    pub emit: EmitConfig,
}

/// One parsed `section.key = value` line.
struct Entry {
    line: usize,
    path: Vec<String>,
    value: String,
}

fn split_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            bail!("line {line}: expected `section.key = value`, got `{stripped}`");
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            bail!("line {line}: empty key or value");
        }
        let path: Vec<String> = key.split('.').map(|part| part.trim().to_string()).collect();
        if path.iter().any(String::is_empty) || path.len() < 2 {
            bail!("line {line}: malformed key `{key}`");
        }
        entries.push(Entry {
            line,
            path,
            value: value.to_string(),
        });
    }
    Ok(entries)
}

fn parse_num<T: std::str::FromStr>(entry: &Entry, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    entry.value.parse::<T>().map_err(|e| {
        anyhow::anyhow!(
            "line {}: key `{}` expects {what}, got `{}` ({e})",
            entry.line,
            entry.path.join("."),
            entry.value
        )
    })
}

fn parse_bool(entry: &Entry) -> Result<bool> {
    match entry.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => bail!(
            "line {}: key `{}` expects true or false, got `{other}`",
            entry.line,
            entry.path.join(".")
        ),
    }
}

fn parse_rule(entry: &Entry) -> Result<RuleConfig> {
    let (name, arg) = match entry.value.split_once(':') {
        Some((name, arg)) => (name.trim(), Some(arg.trim())),
        None => (entry.value.as_str(), None),
    };
    let bad_arg = || {
        anyhow::anyhow!(
            "line {}: rule `{}` has a malformed argument",
            entry.line,
            entry.value
        )
    };
    let num = |arg: &str| arg.parse::<f64>().map_err(|_| bad_arg());
    let rule = match (name, arg) {
        ("fixed", Some(arg)) => RuleConfig::Fixed(num(arg)?),
        ("fixed", None) => bail!(
            "line {}: rule `fixed` needs a value, like fixed:0.1",
            entry.line
        ),
        ("optimal", None) => RuleConfig::Optimal,
        ("gcv", None) => RuleConfig::Gcv,
        ("wgcv", None) => RuleConfig::Wgcv(None),
        ("wgcv", Some(arg)) => RuleConfig::Wgcv(Some(num(arg)?)),
        ("dp", None) => RuleConfig::Dp { tau: 1.0 },
        ("dp", Some(arg)) => RuleConfig::Dp { tau: num(arg)? },
        ("upre", None) => RuleConfig::Upre(None),
        ("upre", Some(arg)) => RuleConfig::Upre(Some(num(arg)?)),
        _ => bail!(
            "line {}: unknown rule `{}` (expected fixed:L, optimal, gcv, wgcv[:omega], dp[:tau], upre[:eta2])",
            entry.line,
            entry.value
        ),
    };
    Ok(rule)
}

/// Raw prior keys gathered per section before kind resolution.
#[derive(Default)]
struct PriorBuilder {
    kind: Option<(usize, String)>,
    nu: Option<f64>,
    alpha: Option<f64>,
    gamma: Option<f64>,
    first_line: Option<usize>,
}

impl PriorBuilder {
    fn set(&mut self, entry: &Entry, key: &str) -> Result<()> {
        self.first_line.get_or_insert(entry.line);
        match key {
            "kind" => self.kind = Some((entry.line, entry.value.clone())),
            "nu" => self.nu = Some(parse_num(entry, "a number")?),
            "alpha" => self.alpha = Some(parse_num(entry, "a number")?),
            "gamma" => self.gamma = Some(parse_num(entry, "a number")?),
            other => bail!(
                "line {}: unknown key `{}` (prior keys are kind, nu, alpha, gamma)",
                entry.line,
                entry
                    .path
                    .split_last()
                    .map(|(_, head)| format!("{}.{other}", head.join(".")))
                    .unwrap_or_else(|| other.to_string())
            ),
        }
        Ok(())
    }

    fn is_empty(&self) -> bool {
        self.first_line.is_none()
    }

    fn build(self) -> Result<PriorConfig> {
        let line = self.first_line.unwrap_or(0);
        let Some((kind_line, kind)) = self.kind else {
            bail!("line {line}: prior section needs `kind` (identity, matern, gamma_exp, gaussian)");
        };
        let need_alpha = || {
            self.alpha.ok_or_else(|| {
                anyhow::anyhow!("line {kind_line}: prior kind `{kind}` needs `alpha`")
            })
        };
        let reject = |key: &str, set: bool| -> Result<()> {
            if set {
                bail!("line {kind_line}: prior kind `{kind}` does not take `{key}`");
            }
            Ok(())
        };
        let prior = match kind.as_str() {
            "identity" => {
                reject("nu", self.nu.is_some())?;
                reject("alpha", self.alpha.is_some())?;
                reject("gamma", self.gamma.is_some())?;
                PriorConfig::Identity
            }
            "matern" => {
                reject("gamma", self.gamma.is_some())?;
                PriorConfig::Matern {
                    nu: self.nu.unwrap_or(0.5),
                    alpha: need_alpha()?,
                }
            }
            "gamma_exp" => {
                reject("nu", self.nu.is_some())?;
                PriorConfig::GammaExponential {
                    gamma: self.gamma.unwrap_or(1.0),
                    alpha: need_alpha()?,
                }
            }
            "gaussian" => {
                reject("nu", self.nu.is_some())?;
                reject("gamma", self.gamma.is_some())?;
                PriorConfig::Gaussian {
                    alpha: need_alpha()?,
                }
            }
            other => bail!(
                "line {kind_line}: unknown prior kind `{other}` (identity, matern, gamma_exp, gaussian)"
            ),
        };
        Ok(prior)
    }
}

#[derive(Default)]
struct SolverBuilder {
    variant: Option<SolverVariant>,
    rule: Option<RuleConfig>,
    max_iter: Option<usize>,
    gcv_window: Option<usize>,
    gcv_flat_tol: Option<f64>,
    residual_tol: Option<f64>,
    reorth: Option<bool>,
    prior: PriorBuilder,
}

impl SolverBuilder {
    fn set(&mut self, entry: &Entry, key: &str) -> Result<()> {
        match key {
            "variant" => {
                self.variant = Some(match entry.value.as_str() {
                    "lsqr" => SolverVariant::Lsqr,
                    "lsmr" => SolverVariant::Lsmr,
                    other => bail!(
                        "line {}: unknown solver variant `{other}` (lsqr or lsmr)",
                        entry.line
                    ),
                })
            }
            "rule" => self.rule = Some(parse_rule(entry)?),
            "max_iter" => self.max_iter = Some(parse_num(entry, "a positive integer")?),
            "gcv_window" => self.gcv_window = Some(parse_num(entry, "an integer")?),
            "gcv_flat_tol" => self.gcv_flat_tol = Some(parse_num(entry, "a number")?),
            "residual_tol" => self.residual_tol = Some(parse_num(entry, "a number")?),
            "reorth" => self.reorth = Some(parse_bool(entry)?),
            other => bail!(
                "line {}: unknown key `{}`",
                entry.line,
                format!("solver.{other}")
            ),
        }
        Ok(())
    }

    fn build(self, name: String) -> Result<SolverConfig> {
        let prior = if self.prior.is_empty() {
            None
        } else {
            Some(self.prior.build()?)
        };
        Ok(SolverConfig {
            name,
            variant: self.variant.unwrap_or(SolverVariant::Lsqr),
            rule: self.rule.unwrap_or(RuleConfig::Gcv),
            max_iter: self.max_iter.unwrap_or(100),
            gcv_window: self.gcv_window.unwrap_or(3),
            gcv_flat_tol: self.gcv_flat_tol.unwrap_or(1e-6),
            residual_tol: self.residual_tol,
            reorth: self.reorth.unwrap_or(true),
            prior,
        })
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let entries = split_entries(text)?;

    let mut kind: Option<(usize, String)> = None;
    let mut n = None;
    let mut n_side = None;
    let mut n_sou = None;
    let mut n_rec = None;
    let mut hi_side = None;
    let mut frames = None;
    let mut lo_factor = None;
    let mut noise = None;
    let mut seed = None;
    let mut mu = None;
    let mut kl_theta = None;
    let mut kl_length = None;
    let mut kl_mean = None;
    let mut kl_modes = None;

    let mut prior = PriorBuilder::default();
    let mut output_dir: Option<PathBuf> = None;
    let mut emit = EmitConfig {
        history_csv: true,
        picard_csv: false,
        images: true,
        diagnostics: false,
    };

    let mut solver_order: Vec<String> = Vec::new();
    let mut solvers: Vec<(String, SolverBuilder)> = Vec::new();

    for entry in &entries {
        let section = entry.path[0].as_str();
        match section {
            "problem" => {
                if entry.path.len() != 2 {
                    bail!(
                        "line {}: malformed key `{}`",
                        entry.line,
                        entry.path.join(".")
                    );
                }
                match entry.path[1].as_str() {
                    "kind" => kind = Some((entry.line, entry.value.clone())),
                    "n" => n = Some((entry.line, parse_num(entry, "a positive integer")?)),
                    "n_side" => {
                        n_side = Some((entry.line, parse_num(entry, "a positive integer")?))
                    }
                    "n_sou" => n_sou = Some((entry.line, parse_num(entry, "a positive integer")?)),
                    "n_rec" => n_rec = Some((entry.line, parse_num(entry, "a positive integer")?)),
                    "hi_side" => {
                        hi_side = Some((entry.line, parse_num(entry, "a positive integer")?))
                    }
                    "frames" => {
                        frames = Some((entry.line, parse_num(entry, "a positive integer")?))
                    }
                    "lo_factor" => {
                        lo_factor = Some((entry.line, parse_num(entry, "a positive integer")?))
                    }
                    "noise" => noise = Some(parse_num(entry, "a number")?),
                    "seed" => seed = Some(parse_num(entry, "an integer")?),
                    "mu" => mu = Some(parse_num(entry, "a number")?),
                    "kl_theta" => kl_theta = Some((entry.line, parse_num(entry, "a number")?)),
                    "kl_length" => kl_length = Some((entry.line, parse_num(entry, "a number")?)),
                    "kl_mean" => kl_mean = Some((entry.line, parse_num(entry, "a number")?)),
                    "kl_modes" => {
                        kl_modes = Some((entry.line, parse_num(entry, "a positive integer")?))
                    }
                    other => bail!("line {}: unknown key `problem.{other}`", entry.line),
                }
            }
            "prior" => {
                if entry.path.len() != 2 {
                    bail!(
                        "line {}: malformed key `{}`",
                        entry.line,
                        entry.path.join(".")
                    );
                }
                prior.set(entry, entry.path[1].as_str())?;
            }
            "output" => {
                if entry.path.len() != 2 || entry.path[1] != "dir" {
                    bail!(
                        "line {}: unknown key `{}` (only output.dir is recognized)",
                        entry.line,
                        entry.path.join(".")
                    );
                }
                output_dir = Some(PathBuf::from(&entry.value));
            }
            "emit" => {
                if entry.path.len() != 2 {
                    bail!(
                        "line {}: malformed key `{}`",
                        entry.line,
                        entry.path.join(".")
                    );
                }
                match entry.path[1].as_str() {
                    "history_csv" => emit.history_csv = parse_bool(entry)?,
                    "picard_csv" => emit.picard_csv = parse_bool(entry)?,
                    "images" => emit.images = parse_bool(entry)?,
                    "diagnostics" => emit.diagnostics = parse_bool(entry)?,
                    other => bail!("line {}: unknown key `emit.{other}`", entry.line),
                }
            }
            "solver" => {
                let (name, rest) = match entry.path.len() {
                    // `solver.key = value` names an implicit single solver.
                    2 => ("main".to_string(), &entry.path[1..]),
                    3 | 4 => (entry.path[1].clone(), &entry.path[2..]),
                    _ => bail!(
                        "line {}: malformed key `{}`",
                        entry.line,
                        entry.path.join(".")
                    ),
                };
                if !solver_order.contains(&name) {
                    solver_order.push(name.clone());
                    solvers.push((name.clone(), SolverBuilder::default()));
                }
                let builder = &mut solvers
                    .iter_mut()
                    .find(|(n, _)| *n == name)
                    .expect("just inserted")
                    .1;
                if rest[0] == "prior" {
                    if rest.len() != 2 {
                        bail!(
                            "line {}: malformed key `{}`",
                            entry.line,
                            entry.path.join(".")
                        );
                    }
                    builder.prior.set(entry, rest[1].as_str())?;
                } else {
                    if rest.len() != 1 {
                        bail!(
                            "line {}: malformed key `{}`",
                            entry.line,
                            entry.path.join(".")
                        );
                    }
                    builder.set(entry, rest[0].as_str())?;
                }
            }
            other => bail!("line {}: unknown section `{other}`", entry.line),
        }
    }

    let Some((kind_line, kind_raw)) = kind else {
        bail!("missing key `problem.kind` (heat, seismic, superres)");
    };
    let kind = match kind_raw.as_str() {
        "heat" => ProblemKind::Heat,
        "seismic" => ProblemKind::Seismic,
        "superres" => ProblemKind::Superres,
        other => bail!("line {kind_line}: unknown problem kind `{other}`"),
    };

    // Keys tied to one generator are rejected for the others so typos do not
    // silently fall back to defaults.
    let reject = |key: &str, line: Option<usize>| -> Result<()> {
        if let Some(line) = line {
            bail!(
                "line {line}: key `problem.{key}` does not apply to problem.kind = {}",
                kind.label()
            );
        }
        Ok(())
    };
    match kind {
        ProblemKind::Heat => {
            for (key, line) in [
                ("n_side", n_side.map(|(l, _)| l)),
                ("n_sou", n_sou.map(|(l, _)| l)),
                ("n_rec", n_rec.map(|(l, _)| l)),
                ("hi_side", hi_side.map(|(l, _)| l)),
                ("frames", frames.map(|(l, _)| l)),
                ("lo_factor", lo_factor.map(|(l, _)| l)),
                ("kl_theta", kl_theta.map(|(l, _)| l)),
                ("kl_length", kl_length.map(|(l, _)| l)),
                ("kl_mean", kl_mean.map(|(l, _)| l)),
                ("kl_modes", kl_modes.map(|(l, _)| l)),
            ] {
                reject(key, line)?;
            }
        }
        ProblemKind::Seismic => {
            for (key, line) in [
                ("n", n.map(|(l, _)| l)),
                ("hi_side", hi_side.map(|(l, _)| l)),
                ("frames", frames.map(|(l, _)| l)),
                ("lo_factor", lo_factor.map(|(l, _)| l)),
            ] {
                reject(key, line)?;
            }
        }
        ProblemKind::Superres => {
            for (key, line) in [
                ("n", n.map(|(l, _)| l)),
                ("n_side", n_side.map(|(l, _)| l)),
                ("n_sou", n_sou.map(|(l, _)| l)),
                ("n_rec", n_rec.map(|(l, _)| l)),
                ("kl_theta", kl_theta.map(|(l, _)| l)),
                ("kl_length", kl_length.map(|(l, _)| l)),
                ("kl_mean", kl_mean.map(|(l, _)| l)),
                ("kl_modes", kl_modes.map(|(l, _)| l)),
            ] {
                reject(key, line)?;
            }
        }
    }

    let problem = ProblemConfig {
        kind,
        n: n.map(|(_, v)| v).unwrap_or(64),
        n_side: n_side.map(|(_, v)| v).unwrap_or(64),
        n_sou: n_sou.map(|(_, v)| v).unwrap_or(20),
        n_rec: n_rec.map(|(_, v)| v).unwrap_or(20),
        hi_side: hi_side.map(|(_, v)| v).unwrap_or(64),
        frames: frames.map(|(_, v)| v).unwrap_or(5),
        lo_factor: lo_factor.map(|(_, v)| v).unwrap_or(2),
        noise: noise.unwrap_or(0.02),
        seed: seed.unwrap_or(1),
        mu,
        kl_theta: kl_theta.map(|(_, v)| v).unwrap_or(1e-3),
        kl_length: kl_length.map(|(_, v)| v).unwrap_or(100.0),
        kl_mean: kl_mean.map(|(_, v)| v).unwrap_or(0.08),
        kl_modes: kl_modes.map(|(_, v)| v).unwrap_or(20),
    };

    let prior = if prior.is_empty() {
        PriorConfig::Identity
    } else {
        prior.build()?
    };

    let mut built_solvers = Vec::new();
    if solvers.is_empty() {
        built_solvers.push(SolverBuilder::default().build("main".to_string())?);
    } else {
        for (name, builder) in solvers {
            built_solvers.push(builder.build(name)?);
        }
    }

    Ok(RunConfig {
        problem,
        prior,
        solvers: built_solvers,
        output_dir: output_dir.unwrap_or_else(|| PathBuf::from("out")),
        emit,
    })
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing config {}", path.display()))
}

impl RunConfig {
    /// Canonical listing of the configuration with all defaults filled,
    /// echoed at the top of every run log.
    pub fn echo(&self, effective_seed: u64) -> String {
        let mut out = String::from("# effective configuration\n");
        let p = &self.problem;
        let _ = writeln!(out, "problem.kind = {}", p.kind.label());
        match p.kind {
            ProblemKind::Heat => {
                let _ = writeln!(out, "problem.n = {}", p.n);
            }
            ProblemKind::Seismic => {
                let _ = writeln!(out, "problem.n_side = {}", p.n_side);
                let _ = writeln!(out, "problem.n_sou = {}", p.n_sou);
                let _ = writeln!(out, "problem.n_rec = {}", p.n_rec);
                let _ = writeln!(out, "problem.kl_theta = {}", p.kl_theta);
                let _ = writeln!(out, "problem.kl_length = {}", p.kl_length);
                let _ = writeln!(out, "problem.kl_mean = {}", p.kl_mean);
                let _ = writeln!(out, "problem.kl_modes = {}", p.kl_modes);
            }
            ProblemKind::Superres => {
                let _ = writeln!(out, "problem.hi_side = {}", p.hi_side);
                let _ = writeln!(out, "problem.frames = {}", p.frames);
                let _ = writeln!(out, "problem.lo_factor = {}", p.lo_factor);
            }
        }
        let _ = writeln!(out, "problem.noise = {}", p.noise);
        let _ = writeln!(out, "problem.seed = {effective_seed}");
        let _ = writeln!(out, "problem.mu = {}", p.effective_mu());
        let _ = writeln!(out, "prior = {}", self.prior.describe());
        let _ = writeln!(out, "output.dir = {}", self.output_dir.display());
        let _ = writeln!(out, "emit.history_csv = {}", self.emit.history_csv);
        let _ = writeln!(out, "emit.picard_csv = {}", self.emit.picard_csv);
        let _ = writeln!(out, "emit.images = {}", self.emit.images);
        let _ = writeln!(out, "emit.diagnostics = {}", self.emit.diagnostics);
        for solver in &self.solvers {
            let s = &solver.name;
            let _ = writeln!(
                out,
                "solver.{s}.variant = {}",
                match solver.variant {
                    SolverVariant::Lsqr => "lsqr",
                    SolverVariant::Lsmr => "lsmr",
                }
            );
            let _ = writeln!(out, "solver.{s}.rule = {}", solver.rule.describe());
            let _ = writeln!(out, "solver.{s}.max_iter = {}", solver.max_iter);
            let _ = writeln!(out, "solver.{s}.gcv_window = {}", solver.gcv_window);
            let _ = writeln!(out, "solver.{s}.gcv_flat_tol = {}", solver.gcv_flat_tol);
            if let Some(tol) = solver.residual_tol {
                let _ = writeln!(out, "solver.{s}.residual_tol = {tol}");
            }
            let _ = writeln!(out, "solver.{s}.reorth = {}", solver.reorth);
            if let Some(prior) = &solver.prior {
                let _ = writeln!(out, "solver.{s}.prior = {}", prior.describe());
            }
        }
        out
    }
}
