//! Power network model: buses, lines, the complex nodal admittance matrix,
//! AC injection equations, and operating limits.
//!
//! Everything is expressed in the per-unit system; base quantities never
//! enter the library. All types are immutable after construction and cheap
//! to share across trial workers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A transmission line between two buses, described by its series admittance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub admittance: Complex64,
}

impl Line {
    pub fn new(from: usize, to: usize, g: f64, b: f64) -> Self {
        Line {
            from,
            to,
            admittance: Complex64::new(g, b),
        }
    }

    /// Series admittance of a line with resistance `r` and reactance `x`.
    pub fn from_impedance(from: usize, to: usize, r: f64, x: f64) -> Self {
        let z = Complex64::new(r, x);
        Line {
            from,
            to,
            admittance: z.inv(),
        }
    }
}

/// Inclusive elementwise bounds for one monitored quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Self {
        Bounds { lo, hi }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }
}

/// Operating limits for voltage magnitude, angle, and bus power injections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingLimits {
    pub v: Bounds,
    pub theta: Bounds,
    pub p: Bounds,
    pub q: Bounds,
}

impl OperatingLimits {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("v", self.v),
            ("theta", self.theta),
            ("p", self.p),
            ("q", self.q),
        ] {
            if !(b.lo <= b.hi) {
                return Err(Error::Config(format!(
                    "limit {name}: lower bound {} exceeds upper bound {}",
                    b.lo, b.hi
                )));
            }
        }
        Ok(())
    }
}

/// One out-of-bounds entry found by a limit check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitViolation {
    pub quantity: LimitKind,
    pub index: usize,
    pub value: f64,
    pub bound: f64,
    /// Distance beyond the violated bound (always positive).
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitKind {
    Voltage,
    Angle,
    ActivePower,
    ReactivePower,
}

/// Result of checking a set of values against limits; empty means feasible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub violations: Vec<LimitViolation>,
}

impl LimitReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(mut self, other: LimitReport) -> LimitReport {
        self.violations.extend(other.violations);
        self
    }
}

/// Checks `values` against inclusive `bounds`, reporting every violation
/// with its margin.
pub fn check_limits(quantity: LimitKind, values: &[f64], bounds: Bounds) -> LimitReport {
    let mut violations = Vec::new();
    for (index, &value) in values.iter().enumerate() {
        if value < bounds.lo {
            violations.push(LimitViolation {
                quantity,
                index,
                value,
                bound: bounds.lo,
                margin: bounds.lo - value,
            });
        } else if value > bounds.hi {
            violations.push(LimitViolation {
                quantity,
                index,
                value,
                bound: bounds.hi,
                margin: value - bounds.hi,
            });
        }
    }
    LimitReport { violations }
}

/// The power network: topology, admittances, slack bus, and limits.
#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    bus_count: usize,
    lines: Vec<Line>,
    shunts: Vec<Complex64>,
    slack_bus: usize,
    limits: OperatingLimits,
}

impl GridModel {
    pub fn new(
        bus_count: usize,
        lines: Vec<Line>,
        shunts: Vec<Complex64>,
        slack_bus: usize,
        limits: OperatingLimits,
    ) -> Result<Self> {
        if bus_count == 0 {
            return Err(Error::Topology("grid must have at least one bus".into()));
        }
        if slack_bus >= bus_count {
            return Err(Error::Topology(format!(
                "slack bus {slack_bus} out of range for {bus_count} buses"
            )));
        }
        if shunts.len() != bus_count {
            return Err(Error::Dimension {
                expected: bus_count,
                actual: shunts.len(),
                context: "shunt vector",
            });
        }
        for (k, line) in lines.iter().enumerate() {
            if line.from >= bus_count || line.to >= bus_count {
                return Err(Error::Topology(format!(
                    "line {k} endpoint out of range ({}-{})",
                    line.from, line.to
                )));
            }
            if line.from == line.to {
                return Err(Error::Topology(format!(
                    "line {k} is a self-loop at bus {}",
                    line.from
                )));
            }
        }
        limits.validate()?;
        let grid = GridModel {
            bus_count,
            lines,
            shunts,
            slack_bus,
            limits,
        };
        if !grid.is_connected() {
            return Err(Error::Topology("network graph is not connected".into()));
        }
        Ok(grid)
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn shunts(&self) -> &[Complex64] {
        &self.shunts
    }

    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }

    pub fn limits(&self) -> &OperatingLimits {
        &self.limits
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.bus_count];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for line in &self.lines {
                let next = if line.from == i {
                    line.to
                } else if line.to == i {
                    line.from
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Builds the nodal admittance matrix, including shunt elements.
    pub fn admittance(&self) -> AdmittanceMatrix {
        self.admittance_with_shunts(true)
    }

    /// Builds the nodal admittance matrix, optionally dropping shunts.
    pub fn admittance_with_shunts(&self, include_shunts: bool) -> AdmittanceMatrix {
        let d = self.bus_count;
        let mut m = DMatrix::<Complex64>::zeros(d, d);
        for line in &self.lines {
            let (i, j, y) = (line.from, line.to, line.admittance);
            m[(i, j)] -= y;
            m[(j, i)] -= y;
            m[(i, i)] += y;
            m[(j, j)] += y;
        }
        if include_shunts {
            for (i, &sh) in self.shunts.iter().enumerate() {
                m[(i, i)] += sh;
            }
        }
        AdmittanceMatrix { m }
    }

    /// Stable content hash used for dataset and report provenance.
    pub fn content_hash(&self) -> String {
        let mut h = Fnv64::new();
        h.write_u64(self.bus_count as u64);
        h.write_u64(self.slack_bus as u64);
        for line in &self.lines {
            h.write_u64(line.from as u64);
            h.write_u64(line.to as u64);
            h.write_f64(line.admittance.re);
            h.write_f64(line.admittance.im);
        }
        for sh in &self.shunts {
            h.write_f64(sh.re);
            h.write_f64(sh.im);
        }
        for b in [
            self.limits.v,
            self.limits.theta,
            self.limits.p,
            self.limits.q,
        ] {
            h.write_f64(b.lo);
            h.write_f64(b.hi);
        }
        format!("{:016x}", h.finish())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GridFile = serde_json::from_str(text)?;
        file.into_grid()
    }

    pub fn to_json(&self) -> String {
        let file = GridFile::from_grid(self);
        serde_json::to_string_pretty(&file).expect("grid file serialization is infallible")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// The 14-bus, 20-line synthetic grid shipped with the crate.
    pub fn fixture_14bus() -> Self {
        Self::from_json(include_str!("../fixtures/grid14.json"))
            .expect("embedded fixture is valid")
    }

    /// The 24-bus, 34-line synthetic grid shipped with the crate. Its larger
    /// feature dimension keeps multi-coordinate triggers sparse relative to
    /// the input, which is what the trigger-sparsity experiment studies.
    pub fn fixture_24bus() -> Self {
        Self::from_json(include_str!("../fixtures/grid24.json"))
            .expect("embedded fixture is valid")
    }
}

/// On-disk grid schema. Indices zero-based, admittances per-unit.
#[derive(Debug, Serialize, Deserialize)]
struct GridFile {
    bus_count: usize,
    slack_bus: usize,
    lines: Vec<LineEntry>,
    shunts: Vec<ShuntEntry>,
    limits: LimitsEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct LineEntry {
    from: usize,
    to: usize,
    g: f64,
    b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShuntEntry {
    bus: usize,
    g: f64,
    b: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LimitsEntry {
    v: [f64; 2],
    theta: [f64; 2],
    p: [f64; 2],
    q: [f64; 2],
}

impl GridFile {
    fn into_grid(self) -> Result<GridModel> {
        let mut shunts = vec![Complex64::new(0.0, 0.0); self.bus_count];
        for entry in &self.shunts {
            if entry.bus >= self.bus_count {
                return Err(Error::Topology(format!(
                    "shunt bus {} out of range",
                    entry.bus
                )));
            }
            shunts[entry.bus] += Complex64::new(entry.g, entry.b);
        }
        let lines = self
            .lines
            .iter()
            .map(|l| Line::new(l.from, l.to, l.g, l.b))
            .collect();
        let limits = OperatingLimits {
            v: Bounds::new(self.limits.v[0], self.limits.v[1]),
            theta: Bounds::new(self.limits.theta[0], self.limits.theta[1]),
            p: Bounds::new(self.limits.p[0], self.limits.p[1]),
            q: Bounds::new(self.limits.q[0], self.limits.q[1]),
        };
        GridModel::new(self.bus_count, lines, shunts, self.slack_bus, limits)
    }

    fn from_grid(grid: &GridModel) -> Self {
        GridFile {
            bus_count: grid.bus_count,
            slack_bus: grid.slack_bus,
            lines: grid
                .lines
                .iter()
                .map(|l| LineEntry {
                    from: l.from,
                    to: l.to,
                    g: l.admittance.re,
                    b: l.admittance.im,
                })
                .collect(),
            shunts: grid
                .shunts
                .iter()
                .enumerate()
                .filter(|(_, s)| s.re != 0.0 || s.im != 0.0)
                .map(|(bus, s)| ShuntEntry {
                    bus,
                    g: s.re,
                    b: s.im,
                })
                .collect(),
            limits: LimitsEntry {
                v: [grid.limits.v.lo, grid.limits.v.hi],
                theta: [grid.limits.theta.lo, grid.limits.theta.hi],
                p: [grid.limits.p.lo, grid.limits.p.hi],
                q: [grid.limits.q.lo, grid.limits.q.hi],
            },
        }
    }
}

/// The complex nodal admittance matrix. Symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    m: DMatrix<Complex64>,
}

impl AdmittanceMatrix {
    pub fn from_matrix(m: DMatrix<Complex64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension {
                expected: m.nrows(),
                actual: m.ncols(),
                context: "admittance matrix must be square",
            });
        }
        Ok(AdmittanceMatrix { m })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.m
    }

    /// Real part (conductance matrix).
    pub fn conductance(&self) -> DMatrix<f64> {
        self.m.map(|y| y.re)
    }

    /// Imaginary part (susceptance matrix).
    pub fn susceptance(&self) -> DMatrix<f64> {
        self.m.map(|y| y.im)
    }

    /// Nodal currents from Ohm's law, `i = Y u`.
    pub fn ohm_currents(&self, state: &BusState) -> Result<DVector<Complex64>> {
        if state.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: state.len(),
                context: "ohm_currents state",
            });
        }
        Ok(&self.m * state.voltages())
    }

    /// Per-bus active and reactive injections in the standard polar form:
    /// `p_i = v_i Σ_j v_j (G_ij cos θ_ij + B_ij sin θ_ij)` and
    /// `q_i = v_i Σ_j v_j (G_ij sin θ_ij − B_ij cos θ_ij)`.
    pub fn power_injections(&self, state: &BusState) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.dim();
        if state.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: state.len(),
                context: "power_injections state",
            });
        }
        let v = state.magnitudes();
        let theta = state.angles();
        let mut p = vec![0.0; d];
        let mut q = vec![0.0; d];
        for i in 0..d {
            let mut pi = 0.0;
            let mut qi = 0.0;
            for j in 0..d {
                let y = self.m[(i, j)];
                if y.re == 0.0 && y.im == 0.0 {
                    continue;
                }
                let dt = theta[i] - theta[j];
                let (sin, cos) = dt.sin_cos();
                pi += v[j] * (y.re * cos + y.im * sin);
                qi += v[j] * (y.re * sin - y.im * cos);
            }
            p[i] = v[i] * pi;
            q[i] = v[i] * qi;
        }
        Ok((p, q))
    }

    /// Eliminates one bus by Kron reduction:
    /// `Y' = Y_aa − Y_ab Y_bb⁻¹ Y_ba`. Terminal behavior at the remaining
    /// buses is preserved provided the eliminated bus has zero injection.
    pub fn kron_reduce(&self, bus: usize) -> Result<AdmittanceMatrix> {
        let d = self.dim();
        if bus >= d {
            return Err(Error::Dimension {
                expected: d,
                actual: bus,
                context: "kron_reduce bus index",
            });
        }
        let y_bb = self.m[(bus, bus)];
        if y_bb.norm() == 0.0 {
            return Err(Error::Singular(
                "cannot eliminate bus with zero self-admittance".into(),
            ));
        }
        let keep: Vec<usize> = (0..d).filter(|&i| i != bus).collect();
        let mut m = DMatrix::<Complex64>::zeros(d - 1, d - 1);
        for (r, &i) in keep.iter().enumerate() {
            for (c, &j) in keep.iter().enumerate() {
                m[(r, c)] = self.m[(i, j)] - self.m[(i, bus)] * self.m[(bus, j)] / y_bb;
            }
        }
        Ok(AdmittanceMatrix { m })
    }
}

/// Bus voltages in rectangular form, with polar accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct BusState {
    u: DVector<Complex64>,
}

impl BusState {
    pub fn from_rectangular(u: DVector<Complex64>) -> Self {
        BusState { u }
    }

    pub fn from_components(re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::Dimension {
                expected: re.len(),
                actual: im.len(),
                context: "state components",
            });
        }
        Ok(BusState {
            u: DVector::from_iterator(
                re.len(),
                re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)),
            ),
        })
    }

    pub fn from_polar(magnitudes: &[f64], angles: &[f64]) -> Result<Self> {
        if magnitudes.len() != angles.len() {
            return Err(Error::Dimension {
                expected: magnitudes.len(),
                actual: angles.len(),
                context: "polar state",
            });
        }
        Ok(BusState {
            u: DVector::from_iterator(
                magnitudes.len(),
                magnitudes
                    .iter()
                    .zip(angles)
                    .map(|(&v, &t)| Complex64::from_polar(v, t)),
            ),
        })
    }

    /// Flat profile `1∠0` on `d` buses.
    pub fn flat(d: usize) -> Self {
        BusState {
            u: DVector::from_element(d, Complex64::new(1.0, 0.0)),
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn voltages(&self) -> &DVector<Complex64> {
        &self.u
    }

    pub fn voltage(&self, bus: usize) -> Complex64 {
        self.u[bus]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.u.iter().map(|c| c.norm()).collect()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.u.iter().map(|c| c.arg()).collect()
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.u.iter().map(|c| c.re).collect()
    }

    pub fn imag_parts(&self) -> Vec<f64> {
        self.u.iter().map(|c| c.im).collect()
    }

    /// Keeps only the listed buses, in order.
    pub fn restrict(&self, buses: &[usize]) -> BusState {
        BusState {
            u: DVector::from_iterator(buses.len(), buses.iter().map(|&i| self.u[i])),
        }
    }
}

/// Minimal FNV-1a accumulator for provenance hashes (not cryptographic).
struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }

    fn write_f64(&mut self, v: f64) {
        self.write_bytes(&v.to_bits().to_le_bytes());
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// Provenance hash of arbitrary serializable content.
pub fn content_hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("hashable content serializes");
    let mut h = Fnv64::new();
    h.write_bytes(text.as_bytes());
    format!("{:016x}", h.finish())
}
