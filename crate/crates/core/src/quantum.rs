//! Single-qubit linear algebra: 2×2 complex operators, the Pauli basis,
//! tomographic channel layout, Pauli transfer matrices and average gate
//! fidelity.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

pub type C64 = Complex64;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// A 2×2 complex matrix, row-major.
#[derive(Clone, Copy, PartialEq)]
pub struct Operator2(pub [[C64; 2]; 2]);

impl fmt::Debug for Operator2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.0;
        write!(
            f,
            "[[{}, {}], [{}, {}]]",
            m[0][0], m[0][1], m[1][0], m[1][1]
        )
    }
}

impl Operator2 {
    pub const fn new(a: C64, b: C64, c: C64, d: C64) -> Self {
        Operator2([[a, b], [c, d]])
    }

    pub const fn zero() -> Self {
        Self::new(ZERO, ZERO, ZERO, ZERO)
    }

    pub const fn identity() -> Self {
        Self::new(ONE, ZERO, ZERO, ONE)
    }

    pub const fn pauli_x() -> Self {
        Self::new(ZERO, ONE, ONE, ZERO)
    }

    pub const fn pauli_y() -> Self {
        Self::new(ZERO, C64::new(0.0, -1.0), I, ZERO)
    }

    pub const fn pauli_z() -> Self {
        Self::new(ONE, ZERO, ZERO, C64::new(-1.0, 0.0))
    }

    /// The √X gate, `(1/2)[[1+i, 1-i], [1-i, 1+i]]`.
    pub fn sqrt_x() -> Self {
        let p = C64::new(0.5, 0.5);
        let m = C64::new(0.5, -0.5);
        Self::new(p, m, m, p)
    }

    /// Real diagonal matrix.
    pub fn diag(a: f64, b: f64) -> Self {
        Self::new(C64::new(a, 0.0), ZERO, ZERO, C64::new(b, 0.0))
    }

    /// `|ψ⟩⟨ψ|` for a (not necessarily normalized) state vector.
    pub fn projector(psi: [C64; 2]) -> Self {
        let mut m = [[ZERO; 2]; 2];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = psi[i] * psi[j].conj();
            }
        }
        Operator2(m)
    }

    pub fn dagger(&self) -> Self {
        let m = &self.0;
        Self::new(m[0][0].conj(), m[1][0].conj(), m[0][1].conj(), m[1][1].conj())
    }

    pub fn trace(&self) -> C64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn scale(&self, s: C64) -> Self {
        let m = &self.0;
        Self::new(s * m[0][0], s * m[0][1], s * m[1][0], s * m[1][1])
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Largest entrywise deviation from Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        let m = &self.0;
        let off = (m[0][1] - m[1][0].conj()).norm();
        let d0 = m[0][0].im.abs();
        let d1 = m[1][1].im.abs();
        off.max(d0).max(d1)
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    /// `‖U†U − I‖_F`.
    pub fn unitarity_error(&self) -> f64 {
        (self.dagger() * *self - Self::identity()).frobenius_norm()
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.unitarity_error() <= tol
    }

    /// `U ρ U†`.
    pub fn conjugate(&self, rho: &Operator2) -> Operator2 {
        *self * *rho * self.dagger()
    }

    /// `Tr[self · other]` without forming the product.
    pub fn trace_product(&self, other: &Operator2) -> C64 {
        let a = &self.0;
        let b = &other.0;
        a[0][0] * b[0][0] + a[0][1] * b[1][0] + a[1][0] * b[0][1] + a[1][1] * b[1][1]
    }
}

impl Mul for Operator2 {
    type Output = Operator2;

    fn mul(self, rhs: Operator2) -> Operator2 {
        let a = &self.0;
        let b = &rhs.0;
        Operator2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }
}

impl Add for Operator2 {
    type Output = Operator2;

    fn add(self, rhs: Operator2) -> Operator2 {
        let mut out = self;
        for (o, r) in out.0.iter_mut().flatten().zip(rhs.0.iter().flatten()) {
            *o += r;
        }
        out
    }
}

impl Sub for Operator2 {
    type Output = Operator2;

    fn sub(self, rhs: Operator2) -> Operator2 {
        let mut out = self;
        for (o, r) in out.0.iter_mut().flatten().zip(rhs.0.iter().flatten()) {
            *o -= r;
        }
        out
    }
}

/// Measured Pauli observable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];

    pub fn matrix(self) -> Operator2 {
        match self {
            Pauli::X => Operator2::pauli_x(),
            Pauli::Y => Operator2::pauli_y(),
            Pauli::Z => Operator2::pauli_z(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Pauli::X => "X",
            Pauli::Y => "Y",
            Pauli::Z => "Z",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// The six Pauli-axis eigenstates used as tomographic inputs.
///
/// `Yp`/`Ym` are `|i⟩`/`|−i⟩` (also written `|r⟩`/`|l⟩`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CardinalState {
    Xp,
    Xm,
    Yp,
    Ym,
    Zp,
    Zm,
}

impl CardinalState {
    pub const ALL: [CardinalState; 6] = [
        CardinalState::Xp,
        CardinalState::Xm,
        CardinalState::Yp,
        CardinalState::Ym,
        CardinalState::Zp,
        CardinalState::Zm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CardinalState::Xp => "Xp",
            CardinalState::Xm => "Xm",
            CardinalState::Yp => "Yp",
            CardinalState::Ym => "Ym",
            CardinalState::Zp => "Zp",
            CardinalState::Zm => "Zm",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn axis(self) -> Pauli {
        match self {
            CardinalState::Xp | CardinalState::Xm => Pauli::X,
            CardinalState::Yp | CardinalState::Ym => Pauli::Y,
            CardinalState::Zp | CardinalState::Zm => Pauli::Z,
        }
    }

    /// Eigenvalue of [`Self::axis`] on this state.
    pub fn sign(self) -> f64 {
        match self {
            CardinalState::Xp | CardinalState::Yp | CardinalState::Zp => 1.0,
            _ => -1.0,
        }
    }

    /// `(I + s·P)/2`.
    pub fn density(self) -> Operator2 {
        let half = C64::new(0.5, 0.0);
        (Operator2::identity() + self.axis().matrix().scale(C64::new(self.sign(), 0.0)))
            .scale(half)
    }
}

/// Number of (observable, initial state) pairs.
pub const NUM_CHANNELS: usize = 18;

/// One (observable, initial state) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Channel {
    pub observable: Pauli,
    pub state: CardinalState,
}

impl Channel {
    /// Channels in canonical order: observable-major, states in
    /// `Xp, Xm, Yp, Ym, Zp, Zm` order.
    pub fn all() -> impl Iterator<Item = Channel> {
        Pauli::ALL.into_iter().flat_map(|observable| {
            CardinalState::ALL
                .into_iter()
                .map(move |state| Channel { observable, state })
        })
    }

    pub fn index(self) -> usize {
        self.observable.index() * 6 + self.state.index()
    }

    pub fn from_index(i: usize) -> Channel {
        Channel {
            observable: Pauli::ALL[i / 6],
            state: CardinalState::ALL[i % 6],
        }
    }

    /// Column name, e.g. `exp_X_Yp`.
    pub fn column_name(self) -> String {
        format!("exp_{}_{}", self.observable.label(), self.state.label())
    }
}

/// Expectation values for all 18 channels, in [`Channel::all`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expectations(pub [f64; NUM_CHANNELS]);

impl Expectations {
    pub fn get(&self, observable: Pauli, state: CardinalState) -> f64 {
        self.0[Channel { observable, state }.index()]
    }

    pub fn from_fn(mut f: impl FnMut(Channel) -> f64) -> Self {
        let mut out = [0.0; NUM_CHANNELS];
        for ch in Channel::all() {
            out[ch.index()] = f(ch);
        }
        Expectations(out)
    }

    /// Exact expectations `Tr[O U ρ U†]` of a unitary evolution.
    pub fn of_unitary(u: &Operator2) -> Self {
        let states = CardinalState::ALL.map(|s| u.conjugate(&s.density()));
        Self::from_fn(|ch| {
            ch.observable
                .matrix()
                .trace_product(&states[ch.state.index()])
                .re
        })
    }

    /// Expectations of a channel given by its Pauli transfer matrix.
    pub fn of_ptm(ptm: &PauliTransferMatrix) -> Self {
        let r = &ptm.0;
        Self::from_fn(|ch| {
            let p = ch.observable.index() + 1;
            let q = ch.state.axis().index() + 1;
            r[p][0] + ch.state.sign() * r[p][q]
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `Tr[O ρ]` for a Hermitian observable and a density matrix.
pub fn expectation(observable: &Operator2, state: &Operator2) -> Result<f64> {
    if !observable.is_hermitian(1e-10) {
        return Err(validation(format!(
            "observable is not Hermitian: {observable:?}"
        )));
    }
    if !state.is_hermitian(1e-10) {
        return Err(validation(format!("state is not Hermitian: {state:?}")));
    }
    let tr = state.trace();
    if (tr.re - 1.0).abs() > 1e-8 || tr.im.abs() > 1e-8 {
        return Err(validation(format!("state trace is {tr}, expected 1")));
    }
    let value = observable.trace_product(state);
    debug_assert!(value.im.abs() <= 1e-10, "imaginary residue {}", value.im);
    Ok(value.re)
}

/// `exp(−i (c·I + a⃗·σ⃗) dt)` in closed form.
pub fn expm_pauli(c: f64, a: [f64; 3], dt: f64) -> Operator2 {
    let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let angle = norm * dt;
    let (s, co) = angle.sin_cos();
    // sin(|a|dt)/|a| → dt as |a| → 0
    let k = if norm > 1e-300 { s / norm } else { dt };
    let (ax, ay, az) = (a[0] * k, a[1] * k, a[2] * k);
    // cos·I − i(ax σx + ay σy + az σz)
    let u = Operator2::new(
        C64::new(co, -az),
        C64::new(-ay, -ax),
        C64::new(ay, -ax),
        C64::new(co, az),
    );
    if c == 0.0 {
        u
    } else {
        u.scale(C64::from_polar(1.0, -c * dt))
    }
}

/// `exp(−i H dt)` for Hermitian `H`.
pub fn expm_hermitian(h: &Operator2, dt: f64) -> Operator2 {
    let m = &h.0;
    let c = 0.5 * (m[0][0].re + m[1][1].re);
    let az = 0.5 * (m[0][0].re - m[1][1].re);
    let off = 0.5 * (m[0][1] + m[1][0].conj());
    expm_pauli(c, [off.re, -off.im, az], dt)
}

/// 4×4 real Pauli transfer matrix, rows and columns ordered `(I, X, Y, Z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PauliTransferMatrix(pub [[f64; 4]; 4]);

impl PauliTransferMatrix {
    pub fn identity() -> Self {
        let mut r = [[0.0; 4]; 4];
        for (i, row) in r.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        PauliTransferMatrix(r)
    }

    /// `R_ij = Tr[P_i U P_j U†] / 2`.
    pub fn from_unitary(u: &Operator2) -> Self {
        let basis = [
            Operator2::identity(),
            Operator2::pauli_x(),
            Operator2::pauli_y(),
            Operator2::pauli_z(),
        ];
        let mut r = [[0.0; 4]; 4];
        for (j, pj) in basis.iter().enumerate() {
            let evolved = u.conjugate(pj);
            for (i, pi) in basis.iter().enumerate() {
                r[i][j] = 0.5 * pi.trace_product(&evolved).re;
            }
        }
        PauliTransferMatrix(r)
    }

    /// Reconstruct the transfer matrix from the 18 tomographic expectations.
    pub fn from_expectations(exps: &Expectations) -> Result<Self> {
        if let Some((i, v)) = exps
            .0
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(validation(format!(
                "{} = {v} lies outside [-1, 1]",
                Channel::from_index(i).column_name()
            )));
        }
        Ok(Self::from_expectations_unchecked(exps))
    }

    pub(crate) fn from_expectations_unchecked(exps: &Expectations) -> Self {
        use CardinalState::*;
        let mut r = [[0.0; 4]; 4];
        r[0][0] = 1.0;
        let pairs = [(Xp, Xm), (Yp, Ym), (Zp, Zm)];
        for p in Pauli::ALL {
            let row = p.index() + 1;
            r[row][0] = 0.5 * (exps.get(p, Zp) + exps.get(p, Zm));
            for (q, (plus, minus)) in pairs.iter().enumerate() {
                r[row][q + 1] = 0.5 * (exps.get(p, *plus) - exps.get(p, *minus));
            }
        }
        PauliTransferMatrix(r)
    }

    /// `Tr[selfᵀ · other]`.
    pub fn overlap(&self, other: &PauliTransferMatrix) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Average gate fidelity of a measured channel against a target unitary,
/// `(Tr[R_targetᵀ R]/2 + 1)/3`. Not clamped to `[0, 1]`.
pub fn average_gate_fidelity(
    measured: &PauliTransferMatrix,
    target_unitary: &Operator2,
) -> Result<f64> {
    if !target_unitary.is_unitary(1e-9) {
        return Err(validation(format!(
            "target is not unitary: {target_unitary:?}"
        )));
    }
    Ok(agf_against(measured, &PauliTransferMatrix::from_unitary(target_unitary)))
}

/// [`average_gate_fidelity`] with a precomputed target transfer matrix.
pub fn agf_against(measured: &PauliTransferMatrix, target: &PauliTransferMatrix) -> f64 {
    (target.overlap(measured) / 2.0 + 1.0) / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Operator2, b: &Operator2, tol: f64) -> bool {
        (*a - *b).frobenius_norm() <= tol
    }

    fn ry(angle: f64) -> Operator2 {
        let (s, c) = (angle / 2.0).sin_cos();
        Operator2::new(
            C64::new(c, 0.0),
            C64::new(-s, 0.0),
            C64::new(s, 0.0),
            C64::new(c, 0.0),
        )
    }

    /// Truncated Taylor series of exp(−iH dt).
    fn taylor_expm(h: &Operator2, dt: f64, terms: usize) -> Operator2 {
        let gen = h.scale(C64::new(0.0, -dt));
        let mut term = Operator2::identity();
        let mut sum = Operator2::identity();
        for k in 1..terms {
            term = (term * gen).scale(C64::new(1.0 / k as f64, 0.0));
            sum = sum + term;
        }
        sum
    }

    #[test]
    fn expectation_examples() {
        let z = Operator2::pauli_z();
        let zero = CardinalState::Zp.density();
        let plus = CardinalState::Xp.density();
        assert_eq!(expectation(&z, &zero).unwrap(), 1.0);
        assert_abs_diff_eq!(expectation(&z, &plus).unwrap(), 0.0, epsilon = 1e-15);

        let rotated = ry(0.3).conjugate(&zero);
        let x = Operator2::pauli_x();
        // dense product oracle
        let prod = x * rotated;
        let oracle = (prod.0[0][0] + prod.0[1][1]).re;
        let got = expectation(&x, &rotated).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-14);
        assert_abs_diff_eq!(got, 0.29552020666133955, epsilon = 1e-12);
    }

    #[test]
    fn expectation_rejects_bad_inputs() {
        let not_herm = Operator2::new(ZERO, ONE, ZERO, ZERO);
        assert!(expectation(&not_herm, &CardinalState::Zp.density()).is_err());
        let bad_trace = Operator2::diag(1.0, 0.5);
        assert!(expectation(&Operator2::pauli_z(), &bad_trace).is_err());
    }

    #[test]
    fn cardinal_states_are_pure() {
        for s in CardinalState::ALL {
            let rho = s.density();
            assert_abs_diff_eq!(rho.trace().re, 1.0, epsilon = 1e-15);
            assert!(close(&(rho * rho), &rho, 1e-15));
            assert_eq!(expectation(&s.axis().matrix(), &rho).unwrap(), s.sign());
        }
    }

    #[test]
    fn expm_examples() {
        assert_eq!(expm_hermitian(&Operator2::zero(), 3.7), Operator2::identity());
        let u = expm_hermitian(&Operator2::pauli_x(), FRAC_PI_2);
        let expected = Operator2::pauli_x().scale(C64::new(0.0, -1.0));
        assert!(close(&u, &expected, 1e-15));

        let h = Operator2::pauli_x().scale(C64::new(0.7, 0.0))
            + Operator2::pauli_z().scale(C64::new(0.2, 0.0));
        let u = expm_hermitian(&h, 1.3);
        assert!(close(&u, &taylor_expm(&h, 1.3, 20), 1e-10));
    }

    #[test]
    fn expm_with_identity_component_matches_series() {
        let h = Operator2::new(
            C64::new(0.4, 0.0),
            C64::new(0.1, -0.3),
            C64::new(0.1, 0.3),
            C64::new(-0.9, 0.0),
        );
        assert!(close(&expm_hermitian(&h, 0.8), &taylor_expm(&h, 0.8, 30), 1e-12));
    }

    fn exact_x_channel() -> Expectations {
        Expectations::of_unitary(&Operator2::pauli_x())
    }

    #[test]
    fn ptm_examples() {
        let identity = Expectations::of_unitary(&Operator2::identity());
        assert_eq!(
            PauliTransferMatrix::from_expectations(&identity).unwrap(),
            PauliTransferMatrix::identity()
        );

        let x = PauliTransferMatrix::from_expectations(&exact_x_channel()).unwrap();
        let diag = [1.0, 1.0, -1.0, -1.0];
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { diag[i] } else { 0.0 };
                assert_abs_diff_eq!(x.0[i][j], want, epsilon = 1e-15);
            }
        }

        // Oracle: apply √X to each cardinal state, read off with Tr[Oρ].
        let v = Operator2::sqrt_x();
        let exps = Expectations::from_fn(|ch| {
            let out = v.conjugate(&ch.state.density());
            expectation(&ch.observable.matrix(), &out).unwrap()
        });
        let r = PauliTransferMatrix::from_expectations(&exps).unwrap();
        let want = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, -1.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(r.0[i][j], want[i][j], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn ptm_rejects_out_of_range() {
        let mut exps = exact_x_channel();
        exps.0[4] = 1.0001;
        let err = PauliTransferMatrix::from_expectations(&exps).unwrap_err();
        assert!(err.to_string().contains("exp_X_Zp"));
    }

    #[test]
    fn agf_examples() {
        let v = Operator2::sqrt_x();
        let self_ptm = PauliTransferMatrix::from_unitary(&v);
        assert_abs_diff_eq!(average_gate_fidelity(&self_ptm, &v).unwrap(), 1.0, epsilon = 1e-15);
        let id = PauliTransferMatrix::identity();
        assert_abs_diff_eq!(
            average_gate_fidelity(&id, &v).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        assert!(average_gate_fidelity(&id, &Operator2::diag(1.0, 2.0)).is_err());
    }

    #[test]
    fn ptm_of_rotation_matches_expectation_route() {
        let u = expm_pauli(0.3, [0.2, -0.5, 0.9], 1.1);
        let direct = PauliTransferMatrix::from_unitary(&u);
        let via = PauliTransferMatrix::from_expectations(&Expectations::of_unitary(&u)).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(direct.0[i][j], via.0[i][j], epsilon = 1e-14);
            }
        }
        let back = Expectations::of_ptm(&direct);
        for (a, b) in back.0.iter().zip(Expectations::of_unitary(&u).0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn channel_layout() {
        let names: Vec<_> = Channel::all().map(|c| c.column_name()).collect();
        assert_eq!(names.len(), NUM_CHANNELS);
        assert_eq!(names[0], "exp_X_Xp");
        assert_eq!(names[17], "exp_Z_Zm");
        for (i, ch) in Channel::all().enumerate() {
            assert_eq!(ch.index(), i);
            assert_eq!(Channel::from_index(i), ch);
        }
    }
}
