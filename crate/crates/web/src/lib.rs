//! Three small operations exposed to the browser page in `www/`. Each
//! returns a JSON string so the page needs no bindings beyond strings and
//! numbers; errors come back as `{"error": "..."}`.

use restrict_lab::bl::{alpha_search, AlphaSearch, BlDatum};
use restrict_lab::catalog;
use restrict_lab::extension::{Amplitude, ExtensionEvaluator, Window, WindowedDensity};
use restrict_lab::kakeya::{multilinear_slab_integral, Sampler, Slab, SlabFamily};
use restrict_lab::linalg::LinearMap;
use restrict_lab::quad::QuadratureSpec;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Alpha and a witness subspace for maps given as a JSON list of matrices
/// (each a list of rows) with the given exponents.
pub fn alpha_report(maps: &str, exponents: &str) -> Result<Value, String> {
    let maps: Vec<Vec<Vec<f64>>> = serde_json::from_str(maps).map_err(|e| format!("maps: {e}"))?;
    let p: Vec<f64> = serde_json::from_str(exponents).map_err(|e| format!("exponents: {e}"))?;
    let maps = maps.iter().map(|m| LinearMap::from_rows(m)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let datum = BlDatum::new(maps, p).map_err(|e| e.to_string())?;
    let w = alpha_search(&datum, &AlphaSearch::default()).map_err(|e| e.to_string())?;
    Ok(json!({
        "alpha": w.alpha,
        "finite": w.alpha <= 1e-8,
        "exhaustive": w.exhaustive,
        "witness": w.witness.vectors(),
    }))
}

/// `|E f(x)|` along the segment from `-R e_3` to `R e_3` (shifted by `x1` in
/// the first coordinate) for the paraboloid in R^3 and a bump density of
/// half width `width` centred at `(c, 0)`.
pub fn extension_profile(c: f64, width: f64, x1: f64, r: f64, points: usize) -> Result<Value, String> {
    if !(width > 0.0 && c.abs() + width <= 1.0) {
        return Err("the bump must fit inside (-1, 1)^2".into());
    }
    if points < 2 || points > 4096 {
        return Err("points must lie in 2..=4096".into());
    }
    let surface = catalog::paraboloid(3);
    let f = WindowedDensity { window: Window::Bump { center: vec![c, 0.0], half_widths: vec![width; 2] }, poly: None };
    let amp = Amplitude::indicator(vec![0.0, 0.0], 1.0);
    let mut m = 16;
    let ev = loop {
        let ev = ExtensionEvaluator::new_single(&surface, &amp, &f, &QuadratureSpec::gauss(m)).map_err(|e| e.to_string())?;
        if ev.max_resolved_norm() >= (r * r + x1 * x1).sqrt() || m >= 256 {
            break ev;
        }
        m *= 2;
    };
    let mut xs = Vec::with_capacity(points);
    let mut ys = Vec::with_capacity(points);
    for i in 0..points {
        let t = -r + 2.0 * r * i as f64 / (points - 1) as f64;
        let v = ev.value(&[x1, 0.0, t]).map_err(|e| e.to_string())?;
        xs.push(t);
        ys.push(v.norm());
    }
    Ok(json!({ "x3": xs, "modulus": ys, "quadrature_points": m }))
}

/// Monte-Carlo value of the Loomis-Whitney triple-slab integral against its
/// closed form `(2 lambda)^3`.
pub fn slab_integral(lambda: f64, r: f64, samples: usize, seed: u64) -> Result<Value, String> {
    if !(lambda > 0.0 && lambda <= r) {
        return Err("need 0 < lambda <= R".into());
    }
    let lw = catalog::loomis_whitney();
    let fams = lw
        .maps()
        .iter()
        .map(|m| Slab::new(m.clone(), vec![0.0, 0.0], lambda).map(SlabFamily::single))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let est = multilinear_slab_integral(&fams, lw.exponents(), r, &Sampler::MonteCarlo { samples, seed })
        .map_err(|e| e.to_string())?;
    let exact = (2.0 * lambda).powi(3);
    Ok(json!({
        "value": est.value,
        "std_error": est.std_error,
        "exact": exact,
        "relative_error": (est.value / exact - 1.0).abs(),
    }))
}

#[wasm_bindgen]
pub fn alpha(maps: &str, exponents: &str) -> String {
    respond(alpha_report(maps, exponents))
}

#[wasm_bindgen]
pub fn profile(c: f64, width: f64, x1: f64, r: f64, points: usize) -> String {
    respond(extension_profile(c, width, x1, r, points))
}

#[wasm_bindgen]
pub fn slabs(lambda: f64, r: f64, samples: usize, seed: u32) -> String {
    respond(slab_integral(lambda, r, samples, seed as u64))
}
