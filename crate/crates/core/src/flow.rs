//! Characteristic flow of `u / phi` for piecewise-RT0 velocities and
//! piecewise-constant porosities.
//!
//! Inside a tracking triangle the velocity is `u(x) = a + b x`, so with a
//! cell-constant porosity the ODE `dx/dt = (a + b x)/phi` integrates in
//! closed form,
//!
//! ```text
//! x(t) = x0 + t e~(beta t) (alpha + beta x0),   e~(z) = (e^z - 1)/z,
//! ```
//!
//! with `alpha = a/phi`, `beta = b/phi`. The normal speed on an edge of
//! the triangle is spatially constant (RT0), so the edge-crossing equation
//! is a scalar exponential equation with an explicit root; its sign
//! decides whether the edge can be crossed at all, and the H(div) normal
//! continuity of the field guarantees the flow continues on the other side.
//! The Jacobian determinant accumulates `exp((div u / phi) dt)` inside
//! each piece and the porosity ratio `phi_from/phi_to` at cell crossings.
//!
//! Trajectories that reach a vertex of the sub-mesh (the measure-zero
//! critical set) are perturbed along the incoming direction and flagged.

use thiserror::Error;

use crate::darcy::{DarcyField, EdgeNeighbor};
use crate::geom::Point;
use crate::mesh::PolytopalMesh;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace exceeded {0} crossing events; check tolerances")]
    MaxEventsExceeded(usize),
    #[error("porosity must be strictly positive (cell {cell}: {value})")]
    NonPositivePorosity { cell: usize, value: f64 },
    #[error("start point ({x}, {y}) is outside the domain")]
    StartOutside { x: f64, y: f64 },
}

/// Piecewise-constant (per cell) porosity with recorded bounds.
#[derive(Clone, Debug)]
pub struct Porosity {
    values: Vec<f64>,
    min: f64,
    max: f64,
}

impl Porosity {
    pub fn per_cell(values: Vec<f64>) -> Result<Self, TraceError> {
        let mut min = f64::INFINITY;
        let mut max = 0.0f64;
        for (cell, &v) in values.iter().enumerate() {
            if !(v > 0.0) {
                return Err(TraceError::NonPositivePorosity { cell, value: v });
            }
            min = min.min(v);
            max = max.max(v);
        }
        Ok(Self { values, min, max })
    }

    pub fn constant(mesh: &PolytopalMesh, phi: f64) -> Result<Self, TraceError> {
        Self::per_cell(vec![phi; mesh.cell_count()])
    }

    pub fn of_cell(&self, cell: usize) -> f64 {
        self.values[cell]
    }

    /// `(phi_*, phi^*)`.
    pub fn bounds(&self) -> (f64, f64) {
        (self.min, self.max)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowConfig {
    /// Exit-time tolerance relative to the trace duration.
    pub exit_tol: f64,
    /// Critical-set perturbation relative to the domain diameter.
    pub critical_eps: f64,
    pub max_events: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            exit_tol: 1e-13,
            critical_eps: 1e-12,
            max_events: 100_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceStatus {
    Ok,
    HitCriticalSet,
    LeftDomainClamped,
}

/// One edge crossing.
#[derive(Clone, Copy, Debug)]
pub struct CrossEvent {
    /// Elapsed (unsigned) time since the start of the trace.
    pub time: f64,
    pub tri_from: usize,
    pub tri_to: Option<usize>,
    /// Local edge of `tri_from` that was crossed.
    pub edge: usize,
    pub position: Point,
}

/// Time spent inside one tracking triangle.
#[derive(Clone, Copy, Debug)]
pub struct Segment {
    pub tri: usize,
    pub cell: usize,
    /// Elapsed-time interval `[t0, t1]` (unsigned).
    pub t0: f64,
    pub t1: f64,
    /// `div(w)` of the effective velocity `w = sign * u / phi` on the piece.
    pub gamma: f64,
    /// `|JF|` accumulated up to `t0`.
    pub jac_in: f64,
}

/// A traced characteristic.
#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub start: Point,
    /// Signed duration; negative durations trace the backward flow.
    pub duration: f64,
    pub end: Point,
    pub end_tri: usize,
    pub events: Vec<CrossEvent>,
    pub segments: Vec<Segment>,
    /// Jacobian determinant `|JF_duration|` at the start point.
    pub jacobian: f64,
    pub status: TraceStatus,
}

/// `(e^z - 1)/z`, stable near zero.
fn expm1_over(z: f64) -> f64 {
    if z.abs() < 1e-300 {
        1.0
    } else {
        z.exp_m1() / z
    }
}

pub struct Tracer<'a> {
    pub field: &'a DarcyField,
    pub phi: &'a Porosity,
    pub config: FlowConfig,
    domain_diameter: f64,
}

impl<'a> Tracer<'a> {
    pub fn new(field: &'a DarcyField, phi: &'a Porosity, config: FlowConfig) -> Self {
        let mesh = field.mesh();
        let mut lo = mesh.vertex(0);
        let mut hi = mesh.vertex(0);
        for v in 0..mesh.vertex_count() {
            let p = mesh.vertex(v);
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        Self {
            field,
            phi,
            config,
            domain_diameter: (hi - lo).norm(),
        }
    }

    /// Trace the flow of `u/phi` from `x` over a signed `duration`.
    pub fn trace(&self, x: Point, duration: f64) -> Result<FlowTrace, TraceError> {
        let tri = self
            .field
            .locate(x)
            .ok_or(TraceError::StartOutside { x: x.x, y: x.y })?;
        self.trace_from(tri, x, duration)
    }

    pub fn trace_from(
        &self,
        start_tri: usize,
        start: Point,
        duration: f64,
    ) -> Result<FlowTrace, TraceError> {
        let sign = if duration < 0.0 { -1.0 } else { 1.0 };
        let total = duration.abs();
        let eps_len = self.config.critical_eps * self.domain_diameter;
        let mut tri = start_tri;
        let mut x = start;
        let mut elapsed = 0.0;
        let mut jac = 1.0f64;
        let mut events = Vec::new();
        let mut segments = Vec::new();
        let mut status = TraceStatus::Ok;

        'outer: while elapsed < total {
            if events.len() >= self.config.max_events {
                return Err(TraceError::MaxEventsExceeded(self.config.max_events));
            }
            let t = self.field.tri(tri);
            let phi_k = self.phi.of_cell(t.cell);
            let alpha = (sign / phi_k) * t.a;
            let beta = sign * t.b / phi_k;
            let rem = total - elapsed;

            // Earliest admissible edge crossing. The outward normal speed
            // on edge e is constant: s0 = n.alpha + beta * c; only edges
            // with s0 > 0 can be crossed, which in particular excludes the
            // entry edge (inflow) and tangent edges.
            let mut best: Option<(f64, usize)> = None;
            for e in 0..3 {
                let n = t.edge_normal(e);
                let (p0, p1) = t.edge(e);
                let c = n.dot(&(0.5 * (p0.coords + p1.coords)));
                let s0 = n.dot(&alpha) + beta * c;
                if !(s0 > 0.0) {
                    continue;
                }
                let g0 = n.dot(&x.coords) - c;
                // g(tau) = g0 e^{beta tau} + (s0/beta)(e^{beta tau} - 1);
                // the root is tau = -ln(1 + beta g0 / s0)/beta, defined when
                // the argument stays positive.
                let tau = if beta == 0.0 {
                    -g0 / s0
                } else {
                    let arg = beta * g0 / s0;
                    if arg <= -1.0 {
                        continue;
                    }
                    -arg.ln_1p() / beta
                };
                if !tau.is_finite() {
                    continue;
                }
                // Rounding may put x marginally outside the triangle; a
                // slightly negative root then means "cross immediately".
                let tau = tau.max(0.0);
                if tau > rem * (1.0 + self.config.exit_tol) {
                    continue;
                }
                if best.is_none_or(|(tb, _)| tau < tb) {
                    best = Some((tau.min(rem), e));
                }
            }

            match best {
                None => {
                    // The trajectory stays in this triangle for the rest of
                    // the time span.
                    let w0 = alpha + beta * x.coords;
                    let end = Point::from(x.coords + rem * expm1_over(beta * rem) * w0);
                    segments.push(Segment {
                        tri,
                        cell: t.cell,
                        t0: elapsed,
                        t1: total,
                        gamma: 2.0 * beta,
                        jac_in: jac,
                    });
                    jac *= (2.0 * beta * rem).exp();
                    return Ok(FlowTrace {
                        start,
                        duration,
                        end,
                        end_tri: tri,
                        events,
                        segments,
                        jacobian: jac,
                        status,
                    });
                }
                Some((tau, e)) => {
                    let w0 = alpha + beta * x.coords;
                    let mut hit = Point::from(x.coords + tau * expm1_over(beta * tau) * w0);
                    segments.push(Segment {
                        tri,
                        cell: t.cell,
                        t0: elapsed,
                        t1: elapsed + tau,
                        gamma: 2.0 * beta,
                        jac_in: jac,
                    });
                    jac *= (2.0 * beta * tau).exp();
                    elapsed += tau;
                    if elapsed >= total * (1.0 - self.config.exit_tol) {
                        // Crossing coincides with the end of the span.
                        return Ok(FlowTrace {
                            start,
                            duration,
                            end: hit,
                            end_tri: tri,
                            events,
                            segments,
                            jacobian: jac,
                            status,
                        });
                    }
                    let (p0, p1) = t.edge(e);
                    let near_vertex =
                        (hit - p0).norm() < eps_len || (hit - p1).norm() < eps_len;
                    if near_vertex {
                        // Critical set: nudge along the incoming direction
                        // and re-locate.
                        status = TraceStatus::HitCriticalSet;
                        let w_hit = alpha + beta * hit.coords;
                        let wn = w_hit.norm();
                        if wn > 0.0 {
                            hit = Point::from(hit.coords + (eps_len / wn) * w_hit);
                        }
                        match self.field.locate(hit) {
                            Some(next) => {
                                events.push(CrossEvent {
                                    time: elapsed,
                                    tri_from: tri,
                                    tri_to: Some(next),
                                    edge: e,
                                    position: hit,
                                });
                                let phi_next =
                                    self.phi.of_cell(self.field.tri(next).cell);
                                jac *= phi_k / phi_next;
                                tri = next;
                                x = hit;
                                continue 'outer;
                            }
                            None => {
                                events.push(CrossEvent {
                                    time: elapsed,
                                    tri_from: tri,
                                    tri_to: None,
                                    edge: e,
                                    position: hit,
                                });
                                return Ok(FlowTrace {
                                    start,
                                    duration,
                                    end: hit,
                                    end_tri: tri,
                                    events,
                                    segments,
                                    jacobian: jac,
                                    status: TraceStatus::LeftDomainClamped,
                                });
                            }
                        }
                    }
                    match t.neighbor[e] {
                        EdgeNeighbor::Tri(next) => {
                            events.push(CrossEvent {
                                time: elapsed,
                                tri_from: tri,
                                tri_to: Some(next),
                                edge: e,
                                position: hit,
                            });
                            let phi_next = self.phi.of_cell(self.field.tri(next).cell);
                            jac *= phi_k / phi_next;
                            tri = next;
                            x = hit;
                        }
                        EdgeNeighbor::Boundary => {
                            // Outflow through the boundary: only possible
                            // for fields violating u.n = 0; the trace stops
                            // at the wall and is flagged.
                            events.push(CrossEvent {
                                time: elapsed,
                                tri_from: tri,
                                tri_to: None,
                                edge: e,
                                position: hit,
                            });
                            return Ok(FlowTrace {
                                start,
                                duration,
                                end: hit,
                                end_tri: tri,
                                events,
                                segments,
                                jacobian: jac,
                                status: TraceStatus::LeftDomainClamped,
                            });
                        }
                    }
                }
            }
        }
        Ok(FlowTrace {
            start,
            duration,
            end: x,
            end_tri: tri,
            events,
            segments,
            jacobian: jac,
            status,
        })
    }

    pub fn domain_diameter(&self) -> f64 {
        self.domain_diameter
    }

    /// `C_1(T) = (phi^* / phi_*) exp(Gamma_div T / phi_*)`, the Jacobian
    /// bound constant for a time horizon `t_span`.
    pub fn jacobian_bound(&self, t_span: f64) -> f64 {
        let (phi_min, phi_max) = self.phi.bounds();
        let gamma_div = self.field.max_divergence();
        (phi_max / phi_min) * (gamma_div * t_span.abs() / phi_min).exp()
    }
}

/// Residual of the closed-form Jacobian identity
/// `phi(F_s) |JF_s| - phi(x) = int_0^s |JF_t| (div u)(F_t) dt`,
/// with the right side integrated piecewise in closed form.
pub fn jacobian_identity_residual(trace: &FlowTrace, phi: &Porosity) -> f64 {
    let mut integral = 0.0;
    for seg in &trace.segments {
        let dt = seg.t1 - seg.t0;
        let phi_k = phi.of_cell(seg.cell);
        // The piece contributes phi_k jac_in (e^{gamma dt} - 1); the sign
        // of the duration cancels between the time reversal and div(w).
        integral += phi_k * seg.jac_in * (seg.gamma * dt).exp_m1();
    }
    let phi_start = phi.of_cell(trace.segments.first().map_or(0, |s| s.cell));
    let phi_end = phi.of_cell(trace.segments.last().map_or(0, |s| s.cell));
    (phi_end * trace.jacobian - phi_start - integral).abs()
}

/// Transport operators of one time interval. `T` evaluates test functions
/// at the end-of-step foot point `F_{dt}(x)`; `That` uses the remaining
/// time `t^{(n+1)} - t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    EndOfStep,
    Continuous,
}

/// `T psi (x, t) = psi(F_dt(x), t)` for the interval containing `t`,
/// where `dt` is the full step (`EndOfStep`) or `t^{(n+1)} - t`
/// (`Continuous`).
pub fn transport_value(
    tracer: &Tracer,
    kind: TransportKind,
    step_start: f64,
    step_end: f64,
    psi: &dyn Fn(Point, f64) -> f64,
    x: Point,
    t: f64,
) -> Result<f64, TraceError> {
    let dt = match kind {
        TransportKind::EndOfStep => step_end - step_start,
        TransportKind::Continuous => step_end - t,
    };
    let tr = tracer.trace(x, dt)?;
    Ok(psi(tr.end, t))
}

/// The dual transport `T* psi (x, t) = psi(F_{-dt}(x), t) |JF_{-dt}(x)|`;
/// by the Jacobian identity this equals
/// `phi T_{-u}(psi/phi) + R T_{-u} psi` with
/// `|R| <= dt Gamma_div C_1(T) / phi_*`.
pub fn transport_dual_value(
    tracer: &Tracer,
    kind: TransportKind,
    step_start: f64,
    step_end: f64,
    psi: &dyn Fn(Point, f64) -> f64,
    x: Point,
    t: f64,
) -> Result<f64, TraceError> {
    let dt = match kind {
        TransportKind::EndOfStep => step_end - step_start,
        TransportKind::Continuous => step_end - t,
    };
    let tr = tracer.trace(x, -dt)?;
    Ok(psi(tr.end, t) * tr.jacobian)
}

/// The remainder `R = |JF_{-dt}(x)| - phi(x)/phi(F_{-dt}(x))` of the dual
/// operator expansion at one point.
pub fn dual_remainder(tracer: &Tracer, x: Point, dt: f64) -> Result<f64, TraceError> {
    let tr = tracer.trace(x, -dt)?;
    let phi_start = tracer.phi.of_cell(tracer.field.tri(tr.segments[0].tri).cell);
    let phi_end = tracer.phi.of_cell(tracer.field.tri(tr.end_tri).cell);
    Ok(tr.jacobian - phi_start / phi_end)
}
