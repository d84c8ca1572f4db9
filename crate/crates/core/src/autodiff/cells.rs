use alloc::format;

use super::{Init, ParamId, ParameterStore, Result, RngStream, Tape, Var};

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, rng: &mut RngStream, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Linear {
            w: store.add(&format!("{name}.w"), input, output, Init::Glorot, rng)?,
            b: store.add(&format!("{name}.b"), 1, output, Init::Zeros, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// LSTM with gate order (input, forget, candidate, output).
#[derive(Debug, Clone, Copy)]
pub struct LstmCell {
    pub hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

impl LstmCell {
    pub fn new(store: &mut ParameterStore, rng: &mut RngStream, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let w_x = store.add(&format!("{name}.w_x"), input, 4 * hidden, Init::Glorot, rng)?;
        let w_h = store.add(&format!("{name}.w_h"), hidden, 4 * hidden, Init::Glorot, rng)?;
        let b = store.add(&format!("{name}.b"), 1, 4 * hidden, Init::Zeros, rng)?;
        store.value_mut(b)[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        Ok(LstmCell { hidden, w_x, w_h, b })
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let w_x = tape.param(self.w_x);
        let w_h = tape.param(self.w_h);
        let b = tape.param(self.b);
        let xw = tape.matmul(x, w_x)?;
        let hw = tape.matmul(h, w_h)?;
        let pre = tape.add(xw, hw)?;
        let pre = tape.add(pre, b)?;
        let i = tape.slice_cols(pre, 0, hd)?;
        let f = tape.slice_cols(pre, hd, hd)?;
        let g = tape.slice_cols(pre, 2 * hd, hd)?;
        let o = tape.slice_cols(pre, 3 * hd, hd)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

/// Recurrent highway cell with coupled carry gate (`carry = 1 - transform`).
///
/// The input only enters the first micro-layer; each of the `depth`
/// micro-layers has its own recurrent weights.
#[derive(Debug, Clone)]
pub struct RhnCell {
    pub hidden: usize,
    w: ParamId,
    layers: alloc::vec::Vec<(ParamId, ParamId)>,
}

impl RhnCell {
    pub fn new(store: &mut ParameterStore, rng: &mut RngStream, name: &str, input: usize, hidden: usize, depth: usize) -> Result<Self> {
        assert!(depth >= 1, "highway depth must be at least 1");
        // columns: [h-transform | transform gate]
        let w = store.add(&format!("{name}.w_x"), input, 2 * hidden, Init::Glorot, rng)?;
        let mut layers = alloc::vec::Vec::with_capacity(depth);
        for l in 0..depth {
            let r = store.add(&format!("{name}.r{l}"), hidden, 2 * hidden, Init::Glorot, rng)?;
            let b = store.add(&format!("{name}.b{l}"), 1, 2 * hidden, Init::Zeros, rng)?;
            store.value_mut(b)[hidden..].iter_mut().for_each(|x| *x = -2.0);
            layers.push((r, b));
        }
        Ok(RhnCell { hidden, w, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, s: Var) -> Result<Var> {
        let hd = self.hidden;
        let mut s = s;
        for (l, &(r, b)) in self.layers.iter().enumerate() {
            let r = tape.param(r);
            let b = tape.param(b);
            let mut pre = tape.matmul(s, r)?;
            if l == 0 {
                let w = tape.param(self.w);
                let xw = tape.matmul(x, w)?;
                pre = tape.add(pre, xw)?;
            }
            let pre = tape.add(pre, b)?;
            let h = tape.slice_cols(pre, 0, hd)?;
            let t = tape.slice_cols(pre, hd, hd)?;
            let h = tape.tanh(h);
            let t = tape.sigmoid(t);
            let delta = tape.sub(h, s)?;
            let gated = tape.mul(t, delta)?;
            s = tape.add(s, gated)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Lstm,
    Rhn { depth: usize },
}

impl CellKind {
    pub fn tag(&self) -> alloc::string::String {
        match self {
            CellKind::Lstm => "lstm".into(),
            CellKind::Rhn { depth } => format!("rhn{depth}"),
        }
    }

    pub fn parse(s: &str) -> Option<CellKind> {
        match s {
            "lstm" => Some(CellKind::Lstm),
            "rhn" => Some(CellKind::Rhn { depth: 2 }),
            _ => s
                .strip_prefix("rhn")
                .and_then(|d| d.parse::<usize>().ok())
                .filter(|d| *d >= 1)
                .map(|depth| CellKind::Rhn { depth }),
        }
    }
}

/// Recurrent state: `h` is the output; `c` is only used by the LSTM.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

#[derive(Debug, Clone)]
pub enum Cell {
    Lstm(LstmCell),
    Rhn(RhnCell),
}

impl Cell {
    pub fn new(kind: CellKind, store: &mut ParameterStore, rng: &mut RngStream, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(match kind {
            CellKind::Lstm => Cell::Lstm(LstmCell::new(store, rng, name, input, hidden)?),
            CellKind::Rhn { depth } => Cell::Rhn(RhnCell::new(store, rng, name, input, hidden, depth)?),
        })
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Lstm(c) => c.hidden,
            Cell::Rhn(c) => c.hidden,
        }
    }

    /// State built from an initial output vector `h` (cell memory zero).
    pub fn state_from(&self, tape: &mut Tape<'_>, h: Var) -> CellState {
        match self {
            Cell::Lstm(c) => CellState {
                h,
                c: Some(tape.zeros(1, c.hidden)),
            },
            Cell::Rhn(_) => CellState { h, c: None },
        }
    }

    pub fn zero_state(&self, tape: &mut Tape<'_>) -> CellState {
        let h = tape.zeros(1, self.hidden());
        self.state_from(tape, h)
    }

    pub fn step(&self, tape: &mut Tape<'_>, x: Var, state: CellState) -> Result<CellState> {
        match self {
            Cell::Lstm(cell) => {
                let c = match state.c {
                    Some(c) => c,
                    None => tape.zeros(1, cell.hidden),
                };
                let (h, c) = cell.step(tape, x, state.h, c)?;
                Ok(CellState { h, c: Some(c) })
            }
            Cell::Rhn(cell) => Ok(CellState {
                h: cell.step(tape, x, state.h)?,
                c: None,
            }),
        }
    }
}
