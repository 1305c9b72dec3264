//! High-contrast permeability fields and the nonlinear function catalog.
//!
//! Permeability is piecewise constant per fine triangle: background value 1
//! everywhere, `10^eta` (or a per-channel exponent) inside channel regions
//! described by axis-aligned rectangles. Two shipped presets, `case1` and
//! `case2`, provide channelized layouts used by the experiment harness.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grid::FineMesh;
use crate::{Error, Result};

/// Axis-aligned rectangle in the unit square.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Rect { x0, x1, y0, y1 }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// One high-conductivity channel: a union of rectangles (an L-shaped channel
/// is two rectangles) with an optional per-channel contrast exponent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Channel {
    pub rects: Vec<Rect>,
    /// Contrast exponent override; the field-level `eta` applies when absent.
    #[serde(default)]
    pub exponent: Option<f64>,
}

/// Channel layout for a permeability field.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct ChannelSpec {
    pub channels: Vec<Channel>,
}

impl ChannelSpec {
    /// Empty spec: homogeneous background.
    pub fn empty() -> Self {
        ChannelSpec::default()
    }

    /// Shipped channelized preset with long horizontal runs and an L-shaped
    /// connector.
    pub fn case1() -> Self {
        ChannelSpec {
            channels: vec![
                Channel {
                    rects: vec![Rect::new(0.05, 0.85, 0.22, 0.26)],
                    exponent: None,
                },
                Channel {
                    rects: vec![Rect::new(0.15, 0.95, 0.52, 0.56)],
                    exponent: None,
                },
                Channel {
                    rects: vec![
                        Rect::new(0.32, 0.36, 0.62, 0.92),
                        Rect::new(0.32, 0.72, 0.88, 0.92),
                    ],
                    exponent: None,
                },
            ],
        }
    }

    /// Shipped preset with shorter staggered channels and a vertical barrier.
    pub fn case2() -> Self {
        ChannelSpec {
            channels: vec![
                Channel {
                    rects: vec![Rect::new(0.05, 0.45, 0.12, 0.16)],
                    exponent: None,
                },
                Channel {
                    rects: vec![Rect::new(0.55, 0.95, 0.32, 0.36)],
                    exponent: None,
                },
                Channel {
                    rects: vec![Rect::new(0.62, 0.66, 0.55, 0.95)],
                    exponent: None,
                },
                Channel {
                    rects: vec![
                        Rect::new(0.08, 0.48, 0.68, 0.72),
                        Rect::new(0.44, 0.48, 0.45, 0.72),
                    ],
                    exponent: None,
                },
            ],
        }
    }

    /// Look up a preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "case1" => Ok(Self::case1()),
            "case2" => Ok(Self::case2()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

/// Piecewise-constant permeability on the fine triangulation.
#[derive(Debug, Clone)]
pub struct PermField {
    /// One value per triangle, mesh element order.
    pub values: Vec<f64>,
    pub spec: ChannelSpec,
    pub eta: f64,
    pub seed: u64,
}

impl PermField {
    /// Background-only field, `kappa == 1`.
    pub fn homogeneous(mesh: &FineMesh) -> Self {
        generate_permeability(&ChannelSpec::empty(), 4.0, mesh, 0)
    }

    /// Maximum value of the field.
    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(1.0, f64::max)
    }

    /// Hex SHA-256 of the element values, used to bind offline artifacts to
    /// the field they were built from.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }

    /// Flat text dump: one kappa per element, element (row-major) order.
    pub fn to_flat_text(&self) -> String {
        let mut s = String::new();
        for v in &self.values {
            s.push_str(&format!("{:.17e}\n", v));
        }
        s
    }
}

/// Evaluate the channel spec on a mesh: elements whose centroid lies in any
/// channel rectangle get `10^exponent`, everything else the background 1.
pub fn generate_permeability(spec: &ChannelSpec, eta: f64, mesh: &FineMesh, seed: u64) -> PermField {
    let mut values = vec![1.0; mesh.triangles.len()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let cx = (mesh.nodes[tri[0]][0] + mesh.nodes[tri[1]][0] + mesh.nodes[tri[2]][0]) / 3.0;
        let cy = (mesh.nodes[tri[0]][1] + mesh.nodes[tri[1]][1] + mesh.nodes[tri[2]][1]) / 3.0;
        for ch in &spec.channels {
            if ch.rects.iter().any(|r| r.contains(cx, cy)) {
                let e = ch.exponent.unwrap_or(eta);
                values[t] = 10f64.powf(e);
                break;
            }
        }
    }
    PermField {
        values,
        spec: spec.clone(),
        eta,
        seed,
    }
}

/// Identifier for the shipped nonlinear functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FnId {
    /// `(sin(2 pi mu u) cos(2 pi mu u))^2 exp(-2 pi mu u)`
    F1,
    /// `1 / (1 + sin(2 pi mu u))`
    F2,
    /// `(1 + sin(2 pi mu u)) exp(-2 pi mu u)`, the steady forcing
    GForce,
    /// `exp(mu u)`, the parabolic diffusion multiplier
    BExp,
}

/// A parametrized scalar nonlinearity with its analytic derivative.
#[derive(Debug, Clone, Copy)]
pub struct NonlinearFn {
    pub id: FnId,
    pub mu: f64,
}

impl NonlinearFn {
    pub fn new(id: FnId, mu: f64) -> Self {
        NonlinearFn { id, mu }
    }

    /// Pointwise value.
    pub fn value(&self, u: f64) -> f64 {
        let a = 2.0 * PI * self.mu;
        match self.id {
            FnId::F1 => {
                let sc = (a * u).sin() * (a * u).cos();
                sc * sc * (-a * u).exp()
            }
            FnId::F2 => 1.0 / (1.0 + (a * u).sin()),
            FnId::GForce => (1.0 + (a * u).sin()) * (-a * u).exp(),
            FnId::BExp => (self.mu * u).exp(),
        }
    }

    /// Pointwise analytic derivative with respect to `u`.
    pub fn derivative(&self, u: f64) -> f64 {
        let a = 2.0 * PI * self.mu;
        match self.id {
            FnId::F1 => {
                // f = (1/4) sin^2(2 a u) exp(-a u)
                let s = (2.0 * a * u).sin();
                let c = (2.0 * a * u).cos();
                0.25 * (-a * u).exp() * (4.0 * a * s * c - a * s * s)
            }
            FnId::F2 => {
                let denom = 1.0 + (a * u).sin();
                -a * (a * u).cos() / (denom * denom)
            }
            FnId::GForce => {
                let e = (-a * u).exp();
                a * e * ((a * u).cos() - 1.0 - (a * u).sin())
            }
            FnId::BExp => self.mu * (self.mu * u).exp(),
        }
    }

    /// Guard against the removable singularities of the catalog; reports the
    /// offending node index.
    fn check(&self, u: f64, node: usize) -> Result<()> {
        if let FnId::F2 = self.id {
            let denom = 1.0 + (2.0 * PI * self.mu * u).sin();
            if denom.abs() < 1e-12 {
                return Err(Error::NearSingular {
                    node,
                    magnitude: denom.abs(),
                });
            }
        }
        Ok(())
    }

    /// Checked pointwise value with the node index for diagnostics.
    pub fn value_at(&self, u: f64, node: usize) -> Result<f64> {
        self.check(u, node)?;
        let v = self.value(u);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { node, u });
        }
        Ok(v)
    }
}

/// Componentwise values and analytic derivatives of `f` over a nodal vector.
pub fn eval_nonlinear(f: &NonlinearFn, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut values = Vec::with_capacity(u.len());
    let mut derivs = Vec::with_capacity(u.len());
    for (node, &x) in u.iter().enumerate() {
        values.push(f.value_at(x, node)?);
        derivs.push(f.derivative(x));
    }
    Ok((values, derivs))
}
