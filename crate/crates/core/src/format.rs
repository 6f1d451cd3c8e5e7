//! Text formats: the versioned model file, point-pattern CSV and grid CSV.
//!
//! Lines starting with `#` are comments and are skipped by every reader.
//! Model reals are written with 17 significant digits so that a save/load
//! cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{DppError, Result};
use crate::model::{
    BlockLayout, CorrelationModel, KernelFamily, LikelihoodModel, Point, PointPattern, RkhsKernel, Window,
};
use crate::numerics::SymMatrix;

pub const MODEL_MAGIC: &str = "dpplearn-model";
pub const MODEL_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq)]
pub enum FittedModel {
    Likelihood(LikelihoodModel),
    Correlation(CorrelationModel),
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn reals(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(real).collect::<Vec<_>>().join(" ")
}

fn push_comments(out: &mut String, comments: &[String]) {
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DppError::io(path, e))
}

fn write_expansion_body(
    out: &mut String,
    kind: &str,
    kernel: &RkhsKernel,
    scale_key: &str,
    scale: f64,
    landmarks: &[Point],
    matrix: &SymMatrix,
) {
    let d = landmarks.first().map_or(0, Vec::len);
    let _ = writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}");
    let _ = writeln!(out, "type {kind}");
    let _ = writeln!(out, "d {d}");
    let _ = writeln!(out, "sigma {}", real(kernel.sigma));
    let _ = writeln!(out, "{scale_key} {}", real(scale));
    let _ = writeln!(out, "m {}", landmarks.len());
    for z in landmarks {
        let _ = writeln!(out, "{}", reals(z.iter().copied()));
    }
    for row in matrix.to_rows() {
        let _ = writeln!(out, "{}", reals(row));
    }
}

fn window_line(w: &Window) -> String {
    format!("window {}", reals(w.lo().iter().chain(w.hi()).copied()))
}

pub fn render_model(model: &FittedModel, comments: &[String]) -> String {
    let mut out = String::new();
    push_comments(&mut out, comments);
    match model {
        FittedModel::Likelihood(m) => {
            write_expansion_body(
                &mut out,
                "likelihood",
                &m.kernel,
                "lambda",
                m.lambda,
                &m.landmarks,
                &m.c_matrix,
            );
            let _ = writeln!(out, "{}", window_line(&m.window));
            let _ = writeln!(out, "jitter {}", real(m.jitter));
            let sizes: Vec<String> = m.layout.samples().iter().map(|r| r.len().to_string()).collect();
            let _ = writeln!(out, "sample_sizes {}", sizes.join(" "));
            let f = m.layout.fredholm();
            let _ = writeln!(out, "fredholm {} {}", f.start, f.len());
            let _ = writeln!(
                out,
                "fredholm_from_sample {}",
                u8::from(m.layout.fredholm_from_sample())
            );
            let _ = writeln!(out, "b_matrix");
            for row in m.b_matrix.to_rows() {
                let _ = writeln!(out, "{}", reals(row));
            }
        }
        FittedModel::Correlation(m) => {
            write_expansion_body(
                &mut out,
                "correlation",
                &m.kernel,
                "gamma",
                m.gamma,
                &m.landmarks,
                &m.omega,
            );
            let _ = writeln!(out, "{}", window_line(&m.window));
            let _ = writeln!(out, "jitter {}", real(m.jitter));
            let _ = writeln!(out, "p_used {}", m.p_used);
            let _ = writeln!(out, "core");
            for row in m.core.to_rows() {
                let _ = writeln!(out, "{}", reals(row));
            }
        }
    }
    let _ = writeln!(out, "end");
    out
}

pub fn save_model(path: impl AsRef<Path>, model: &FittedModel, comments: &[String]) -> Result<()> {
    write_text(path.as_ref(), &render_model(model, comments))
}

struct Lines<'a> {
    path: PathBuf,
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    last_line: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &Path, text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> = Box::new(
            text.lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#')),
        );
        Lines {
            path: path.to_path_buf(),
            inner: it.peekable(),
            last_line: 0,
        }
    }

    fn err(&self, line: usize, message: impl Into<String>) -> DppError {
        DppError::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn next(&mut self, expecting: &str) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((n, l)) => {
                self.last_line = n;
                Ok((n, l))
            }
            None => Err(self.err(
                self.last_line + 1,
                format!("unexpected end of file, expecting {expecting}"),
            )),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next(&format!("'{key}'"))?;
        match line.split_once(char::is_whitespace) {
            Some((k, rest)) if k == key => Ok((n, rest.trim())),
            _ if line == key => Ok((n, "")),
            _ => Err(self.err(n, format!("expected '{key} …', found '{line}'"))),
        }
    }

    fn parse_reals(&self, n: usize, text: &str, field: &str) -> Result<Vec<f64>> {
        text.split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| self.err(n, format!("{field}: cannot parse '{t}' as a real")))
            })
            .collect()
    }

    fn parse_real(&self, n: usize, text: &str, field: &str) -> Result<f64> {
        let v = self.parse_reals(n, text, field)?;
        if v.len() != 1 {
            return Err(self.err(n, format!("{field}: expected one value, found {}", v.len())));
        }
        Ok(v[0])
    }

    fn parse_usize(&self, n: usize, text: &str, field: &str) -> Result<usize> {
        text.trim()
            .parse::<usize>()
            .map_err(|_| self.err(n, format!("{field}: cannot parse '{text}' as an integer")))
    }
}

struct Body {
    kind: String,
    kernel: RkhsKernel,
    scale: f64,
    landmarks: Vec<Point>,
    matrix: SymMatrix,
    d: usize,
}

fn read_matrix(lines: &mut Lines<'_>, m: usize, field: &str) -> Result<SymMatrix> {
    let mut rows = Vec::with_capacity(m);
    for r in 0..m {
        let (n, l) = lines.next(&format!("{field} row {r}"))?;
        let row = lines.parse_reals(n, l, field)?;
        if row.len() != m {
            return Err(DppError::DimensionMismatch(format!(
                "{}:{n}: {field} row {r} has {} entries but m = {m}",
                lines.path.display(),
                row.len()
            )));
        }
        rows.push(row);
    }
    SymMatrix::from_rows(&rows)
}

fn read_body(lines: &mut Lines<'_>) -> Result<Body> {
    let (n, header) = lines.next("model header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MODEL_MAGIC) {
        return Err(lines.err(n, format!("not a model file (expected '{MODEL_MAGIC} v1')")));
    }
    match parts.next() {
        Some(MODEL_VERSION) => {}
        Some(other) => {
            return Err(DppError::Version {
                found: other.to_string(),
            })
        }
        None => return Err(lines.err(n, "missing version")),
    }
    let (n, kind) = lines.keyed("type")?;
    if kind != "likelihood" && kind != "correlation" {
        return Err(lines.err(n, format!("unknown model type '{kind}'")));
    }
    let kind = kind.to_string();
    let (n, d) = lines.keyed("d")?;
    let d = lines.parse_usize(n, d, "d")?;
    let (n, sigma) = lines.keyed("sigma")?;
    let sigma = lines.parse_real(n, sigma, "sigma")?;
    let kernel = RkhsKernel {
        family: KernelFamily::Gaussian,
        sigma,
    };
    RkhsKernel::gaussian(sigma).map_err(|e| lines.err(n, e.to_string()))?;
    let scale_key = if kind == "likelihood" { "lambda" } else { "gamma" };
    let (n, scale) = lines.keyed(scale_key)?;
    let scale = lines.parse_real(n, scale, scale_key)?;
    let (n, m) = lines.keyed("m")?;
    let m = lines.parse_usize(n, m, "m")?;
    if m == 0 {
        return Err(lines.err(n, "m must be positive"));
    }
    let mut landmarks = Vec::with_capacity(m);
    for i in 0..m {
        let (n, l) = lines.next(&format!("landmark {i}"))?;
        let z = lines.parse_reals(n, l, "landmark")?;
        if z.len() != d {
            return Err(DppError::DimensionMismatch(format!(
                "{}:{n}: landmark {i} has {} coordinates but d = {d}",
                lines.path.display(),
                z.len()
            )));
        }
        landmarks.push(z);
    }
    let matrix = read_matrix(lines, m, "matrix")?;
    Ok(Body {
        kind,
        kernel,
        scale,
        landmarks,
        matrix,
        d,
    })
}

fn read_window(lines: &mut Lines<'_>, d: usize) -> Result<Window> {
    let (n, w) = lines.keyed("window")?;
    let vals = lines.parse_reals(n, w, "window")?;
    if vals.len() != 2 * d {
        return Err(DppError::DimensionMismatch(format!(
            "{}:{n}: window has {} values, expected {}",
            lines.path.display(),
            vals.len(),
            2 * d
        )));
    }
    Window::new(vals[..d].to_vec(), vals[d..].to_vec()).map_err(|e| lines.err(n, e.to_string()))
}

pub fn parse_model(path: &Path, text: &str) -> Result<FittedModel> {
    let mut lines = Lines::new(path, text);
    let body = read_body(&mut lines)?;
    let window = read_window(&mut lines, body.d)?;
    let model = if body.kind == "likelihood" {
        let (n, j) = lines.keyed("jitter")?;
        let jitter = lines.parse_real(n, j, "jitter")?;
        let (n, sizes) = lines.keyed("sample_sizes")?;
        let sizes = sizes
            .split_whitespace()
            .map(|t| lines.parse_usize(n, t, "sample_sizes"))
            .collect::<Result<Vec<usize>>>()?;
        let (n, f) = lines.keyed("fredholm")?;
        let f: Vec<usize> = f
            .split_whitespace()
            .map(|t| lines.parse_usize(n, t, "fredholm"))
            .collect::<Result<_>>()?;
        if f.len() != 2 {
            return Err(lines.err(n, "fredholm: expected '<start> <len>'"));
        }
        let (n, _) = lines.keyed("fredholm_from_sample")?;
        let mut samples = Vec::new();
        let mut start = 0;
        for s in &sizes {
            samples.push(start..start + s);
            start += s;
        }
        let layout = BlockLayout::new(samples, f[0]..f[0] + f[1], body.landmarks.len())
            .map_err(|e| lines.err(n, e.to_string()))?;
        lines.keyed("b_matrix")?;
        let b_matrix = read_matrix(&mut lines, body.landmarks.len(), "b_matrix")?;
        FittedModel::Likelihood(LikelihoodModel {
            kernel: body.kernel,
            window,
            lambda: body.scale,
            landmarks: body.landmarks,
            c_matrix: body.matrix,
            b_matrix,
            layout,
            jitter,
        })
    } else {
        let (n, j) = lines.keyed("jitter")?;
        let jitter = lines.parse_real(n, j, "jitter")?;
        let (n, p) = lines.keyed("p_used")?;
        let p_used = lines.parse_usize(n, p, "p_used")?;
        lines.keyed("core")?;
        let core = read_matrix(&mut lines, body.landmarks.len(), "core")?;
        FittedModel::Correlation(CorrelationModel {
            kernel: body.kernel,
            window,
            gamma: body.scale,
            landmarks: body.landmarks,
            omega: body.matrix,
            core,
            jitter,
            p_used,
        })
    };
    let (n, l) = lines.next("'end'")?;
    if l != "end" {
        return Err(lines.err(n, format!("expected 'end', found '{l}'")));
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DppError::io(path, e))?;
    parse_model(path, &text)
}

pub fn load_likelihood_model(path: impl AsRef<Path>) -> Result<LikelihoodModel> {
    match load_model(path.as_ref())? {
        FittedModel::Likelihood(m) => Ok(m),
        FittedModel::Correlation(_) => Err(DppError::input(format!(
            "{} holds a correlation model; a likelihood model is required",
            path.as_ref().display()
        ))),
    }
}

/// Renders samples as `sample_id,x0,…` CSV, with the window recorded as a comment.
pub fn render_pattern(window: &Window, samples: &[Vec<Point>], comments: &[String]) -> String {
    let mut out = String::new();
    push_comments(&mut out, comments);
    let _ = writeln!(out, "# window {}", window.to_flat_string());
    let cols: Vec<String> = (0..window.dim()).map(|j| format!("x{j}")).collect();
    let _ = writeln!(out, "sample_id,{}", cols.join(","));
    for (l, sample) in samples.iter().enumerate() {
        for p in sample {
            let coords: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{l},{}", coords.join(","));
        }
    }
    out
}

pub fn write_pattern(
    path: impl AsRef<Path>,
    window: &Window,
    samples: &[Vec<Point>],
    comments: &[String],
) -> Result<()> {
    write_text(path.as_ref(), &render_pattern(window, samples, comments))
}

/// Parses point-pattern CSV.
///
/// The window comes from `window_override`, else from a `# window …` comment,
/// else defaults to the unit cube. A header-only file yields one empty sample.
pub fn parse_pattern(path: &Path, text: &str, window_override: Option<Window>) -> Result<PointPattern> {
    let err = |line: usize, message: String| DppError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut comment_window = None;
    let mut header: Option<usize> = None;
    let mut rows: Vec<(usize, Point)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some(w) = c.trim().strip_prefix("window ") {
                comment_window = Some(Window::parse(w).map_err(|e| err(n, e.to_string()))?);
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match header {
            None => {
                if fields.len() < 2 || fields[0] != "sample_id" {
                    return Err(err(n, format!("expected header 'sample_id,x0,…', found '{line}'")));
                }
                for (j, f) in fields[1..].iter().enumerate() {
                    if *f != format!("x{j}") {
                        return Err(err(n, format!("header column {} should be 'x{j}', found '{f}'", j + 1)));
                    }
                }
                header = Some(fields.len() - 1);
            }
            Some(d) => {
                if fields.len() != d + 1 {
                    return Err(err(n, format!("expected {} fields, found {}", d + 1, fields.len())));
                }
                let id = fields[0]
                    .parse::<usize>()
                    .map_err(|_| err(n, format!("sample_id '{}' is not a non-negative integer", fields[0])))?;
                let p = fields[1..]
                    .iter()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| err(n, format!("cannot parse '{t}' as a real")))
                    })
                    .collect::<Result<Point>>()?;
                rows.push((id, p));
            }
        }
    }
    let d = header.ok_or_else(|| err(0, "missing header line".to_string()))?;
    let window = match window_override.or(comment_window) {
        Some(w) => {
            if w.dim() != d {
                return Err(DppError::DimensionMismatch(format!(
                    "window has dimension {} but the pattern has {d} coordinates",
                    w.dim()
                )));
            }
            w
        }
        None => Window::unit(d),
    };
    let s = rows.iter().map(|(id, _)| id + 1).max().unwrap_or(1);
    let mut samples = vec![Vec::new(); s];
    for (id, p) in rows {
        samples[id].push(p);
    }
    PointPattern::new(window, samples)
}

pub fn load_pattern(path: impl AsRef<Path>, window_override: Option<Window>) -> Result<PointPattern> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DppError::io(path, e))?;
    parse_pattern(path, &text, window_override)
}

/// Generic CSV writer: comment lines, a header, then rows.
pub fn write_csv(
    path: impl AsRef<Path>,
    comments: &[String],
    header: &str,
    rows: impl IntoIterator<Item = String>,
) -> Result<()> {
    let mut out = String::new();
    push_comments(&mut out, comments);
    let _ = writeln!(out, "{header}");
    for r in rows {
        let _ = writeln!(out, "{r}");
    }
    write_text(path.as_ref(), &out)
}

/// `x,y,value` rows for a two-dimensional grid.
pub fn write_grid(path: impl AsRef<Path>, comments: &[String], grid: &[(Point, f64)]) -> Result<()> {
    write_csv(
        path,
        comments,
        "x,y,value",
        grid.iter().map(|(p, v)| format!("{},{},{}", p[0], p[1], v)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_likelihood(m: usize, seed: u64) -> LikelihoodModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Window::unit(2);
        let landmarks: Vec<Point> = (0..m).map(|_| w.sample_uniform(&mut rng)).collect();
        let c = SymMatrix::from_fn(m, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let b = SymMatrix::from_fn(m, |_, _| rng.random::<f64>() * 1e-7).unwrap();
        LikelihoodModel {
            kernel: RkhsKernel::gaussian(0.1 + rng.random::<f64>()).unwrap(),
            window: w,
            lambda: rng.random::<f64>(),
            landmarks,
            c_matrix: c,
            b_matrix: b,
            layout: BlockLayout::appended(&[2, 1], m - 3).unwrap(),
            jitter: 1e-10,
        }
    }

    #[test]
    fn likelihood_round_trip_is_exact() {
        let m = FittedModel::Likelihood(random_likelihood(7, 1));
        let text = render_model(&m, &["argv: test".into()]);
        let back = parse_model(Path::new("mem"), &text).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn correlation_round_trip_is_exact() {
        let l = random_likelihood(4, 2);
        let m = FittedModel::Correlation(CorrelationModel {
            kernel: l.kernel,
            window: Window::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap(),
            gamma: 0.7,
            landmarks: l.landmarks,
            omega: l.c_matrix,
            core: l.b_matrix,
            jitter: 1e-9,
            p_used: 123,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corr.txt");
        save_model(&path, &m, &[]).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let m = FittedModel::Likelihood(random_likelihood(5, 3));
        let text = render_model(&m, &[]);
        let cut: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(matches!(parse_model(Path::new("t"), &cut), Err(DppError::Parse { .. })));
    }

    #[test]
    fn matrix_dimension_mismatch() {
        let text = "dpplearn-model v1\ntype correlation\nd 2\nsigma 0.1\ngamma 1\nm 2\n0.1 0.2\n0.3 0.4\n1 0 0\n0 1 0\n0 0 1\nwindow 0 0 1 1\np_used 3\nend\n";
        assert!(matches!(
            parse_model(Path::new("t"), text),
            Err(DppError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn version_mismatch() {
        let text = "dpplearn-model v2\ntype correlation\n";
        assert!(matches!(
            parse_model(Path::new("t"), text),
            Err(DppError::Version { .. })
        ));
    }

    #[test]
    fn bad_real_reports_line() {
        let text = "# c\ndpplearn-model v1\ntype correlation\nd 2\nsigma abc\n";
        match parse_model(Path::new("t"), text) {
            Err(DppError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pattern_round_trip() {
        let w = Window::unit(2);
        let samples = vec![
            vec![vec![0.1, 0.2], vec![1.0 / 3.0, 0.7]],
            vec![vec![0.123_456_789_012_345_68, 0.9]],
        ];
        let text = render_pattern(&w, &samples, &["seed 1".into()]);
        let p = parse_pattern(Path::new("p"), &text, None).unwrap();
        assert_eq!(p.samples(), samples.as_slice());
        assert_eq!(p.window(), &w);
    }

    #[test]
    fn pattern_window_comment_and_override() {
        let w = Window::new(vec![0.0, 0.0], vec![2.0, 2.0]).unwrap();
        let text = render_pattern(&w, &[vec![vec![1.5, 1.5]]], &[]);
        let p = parse_pattern(Path::new("p"), &text, None).unwrap();
        assert_eq!(p.window(), &w);
        assert!(parse_pattern(Path::new("p"), &text, Some(Window::unit(2))).is_err());
    }

    #[test]
    fn header_only_pattern_is_single_empty_sample() {
        let p = parse_pattern(Path::new("p"), "sample_id,x0,x1\n", None).unwrap();
        assert_eq!(p.num_samples(), 1);
        assert_eq!(p.total_points(), 0);
    }

    #[test]
    fn malformed_pattern_rows() {
        assert!(parse_pattern(Path::new("p"), "sample_id,x0\n0,0.1,0.2\n", None).is_err());
        assert!(parse_pattern(Path::new("p"), "id,x0\n", None).is_err());
        assert!(parse_pattern(Path::new("p"), "sample_id,x0\n-1,0.5\n", None).is_err());
        assert!(parse_pattern(Path::new("p"), "", None).is_err());
    }
}
