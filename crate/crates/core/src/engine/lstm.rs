//! LSTM layer over packed variable-length batches.
//!
//! Sequences are sorted by decreasing length and laid out time-major: the
//! rows of time step `t` are the `batch_sizes[t]` sequences still running at
//! `t`, and those are always the first rows of step `t - 1`. No padding is
//! involved, so every sequence is processed exactly as if it were alone.
//!
//! Gate columns are ordered input, forget, candidate, output.

use rand::Rng;

use super::{gemm, ops::add_column_sums, EngineError, Op, Parameter, Scalar, Tensor};

/// Row layout of a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    batch_sizes: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl Packing {
    /// `lengths` must be non-increasing.
    pub fn from_sorted_lengths(lengths: &[usize]) -> Result<Self, EngineError> {
        if lengths.windows(2).any(|w| w[0] < w[1]) {
            return Err(EngineError::Shape(
                "sequence lengths must be non-increasing".into(),
            ));
        }
        let steps = lengths.first().copied().unwrap_or(0);
        let mut batch_sizes = Vec::with_capacity(steps);
        for t in 0..steps {
            batch_sizes.push(lengths.iter().take_while(|&&l| l > t).count());
        }
        let mut offsets = Vec::with_capacity(steps);
        let mut total = 0;
        for &b in &batch_sizes {
            offsets.push(total);
            total += b;
        }
        Ok(Self {
            batch_sizes,
            offsets,
            total,
        })
    }

    pub fn steps(&self) -> usize {
        self.batch_sizes.len()
    }

    pub fn batch_size(&self, t: usize) -> usize {
        self.batch_sizes[t]
    }

    pub fn offset(&self, t: usize) -> usize {
        self.offsets[t]
    }

    pub fn total_rows(&self) -> usize {
        self.total
    }

    /// Packed row of step `t` of sequence `seq` (in sorted order).
    pub fn row(&self, t: usize, seq: usize) -> usize {
        debug_assert!(seq < self.batch_sizes[t]);
        self.offsets[t] + seq
    }
}

#[derive(Debug, Clone)]
pub struct LstmParams<F> {
    pub input: Parameter<F>,
    pub recurrent: Parameter<F>,
    pub bias: Parameter<F>,
}

fn uniform<F: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor<F> {
    Tensor::from_fn(rows, cols, |_, _| {
        F::from_f64_lossy(rng.random_range(-bound..=bound))
    })
}

impl<F: Scalar> LstmParams<F> {
    pub fn new<R: Rng>(name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let gates = 4 * hidden;
        Self {
            input: Parameter::new(
                format!("{name}.w_input"),
                uniform(rng, input, gates, 1.0 / (input as f64).sqrt()),
            ),
            recurrent: Parameter::new(
                format!("{name}.w_recurrent"),
                uniform(rng, hidden, gates, 1.0 / (hidden as f64).sqrt()),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(1, gates)),
        }
    }

    pub fn input_size(&self) -> usize {
        self.input.value.rows()
    }

    pub fn hidden_size(&self) -> usize {
        self.recurrent.value.rows()
    }

    pub fn parameters(&self) -> [&Parameter<F>; 3] {
        [&self.input, &self.recurrent, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter<F>; 3] {
        [&mut self.input, &mut self.recurrent, &mut self.bias]
    }

    fn check(&self) -> Result<(), EngineError> {
        let h = self.hidden_size();
        if self.input.value.cols() != 4 * h
            || self.recurrent.value.cols() != 4 * h
            || self.bias.value.shape() != [1, 4 * h]
        {
            return Err(EngineError::Shape(format!(
                "inconsistent LSTM parameter shapes {:?} {:?} {:?}",
                self.input.value.shape(),
                self.recurrent.value.shape(),
                self.bias.value.shape()
            )));
        }
        Ok(())
    }
}

/// Hidden and cell state of one layer, `batch x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<F> {
    pub hidden: Tensor<F>,
    pub cell: Tensor<F>,
}

impl<F: Scalar> LstmState<F> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            hidden: Tensor::zeros(batch, hidden),
            cell: Tensor::zeros(batch, hidden),
        }
    }
}

/// Applies the gate nonlinearities to one row of pre-activations in place;
/// `cell_prev` may be `None` for a zero initial state.
#[inline]
fn activate_row<F: Scalar>(
    gates: &mut [F],
    cell_prev: Option<&[F]>,
    cell: &mut [F],
    tanh_cell: &mut [F],
    hidden: &mut [F],
) {
    let h = cell.len();
    F::sigmoid_in_place(&mut gates[..2 * h]);
    F::tanh_in_place(&mut gates[2 * h..3 * h]);
    F::sigmoid_in_place(&mut gates[3 * h..]);
    let (i_g, rest) = gates.split_at(h);
    let (f_g, rest) = rest.split_at(h);
    let (g_g, o_g) = rest.split_at(h);
    match cell_prev {
        Some(c_prev) => {
            for k in 0..h {
                cell[k] = f_g[k] * c_prev[k] + i_g[k] * g_g[k];
            }
        }
        None => {
            for k in 0..h {
                cell[k] = i_g[k] * g_g[k];
            }
        }
    }
    tanh_cell.copy_from_slice(cell);
    F::tanh_in_place(tanh_cell);
    for k in 0..h {
        hidden[k] = o_g[k] * tanh_cell[k];
    }
}

/// One LSTM step: `c' = f*c + i*g`, `h' = o*tanh(c')`.
pub fn lstm_step<F: Scalar>(
    x: &Tensor<F>,
    state: &LstmState<F>,
    params: &LstmParams<F>,
) -> Result<(Tensor<F>, LstmState<F>), EngineError> {
    params.check()?;
    let h = params.hidden_size();
    let b = x.rows();
    if x.cols() != params.input_size()
        || state.hidden.shape() != [b, h]
        || state.cell.shape() != [b, h]
    {
        return Err(EngineError::Shape(format!(
            "lstm_step: x {:?}, state {:?}/{:?}, expected input {} hidden {}",
            x.shape(),
            state.hidden.shape(),
            state.cell.shape(),
            params.input_size(),
            h
        )));
    }
    let mut gates = Tensor::zeros(b, 4 * h);
    for r in 0..b {
        gates.row_mut(r).copy_from_slice(params.bias.value.data());
    }
    gemm(
        b,
        x.cols(),
        4 * h,
        F::one(),
        x.data(),
        Op::N,
        params.input.value.data(),
        Op::N,
        F::one(),
        gates.data_mut(),
    );
    gemm(
        b,
        h,
        4 * h,
        F::one(),
        state.hidden.data(),
        Op::N,
        params.recurrent.value.data(),
        Op::N,
        F::one(),
        gates.data_mut(),
    );
    let mut next = LstmState::zeros(b, h);
    let mut tanh_c = Tensor::zeros(b, h);
    for r in 0..b {
        activate_row(
            gates.row_mut(r),
            Some(state.cell.row(r)),
            next.cell.row_mut(r),
            tanh_c.row_mut(r),
            next.hidden.row_mut(r),
        );
    }
    Ok((next.hidden.clone(), next))
}

/// Forward activations of a layer over a packed batch, kept for backward.
#[derive(Debug, Clone)]
pub struct LstmTrace<F> {
    /// Activated gates, `N x 4H`.
    gates: Tensor<F>,
    cells: Tensor<F>,
    tanh_cells: Tensor<F>,
    /// Layer output, `N x H`.
    pub hidden: Tensor<F>,
}

/// Runs the layer over a packed batch starting from zero states.
pub fn lstm_forward<F: Scalar>(
    params: &LstmParams<F>,
    input: &Tensor<F>,
    packing: &Packing,
) -> Result<LstmTrace<F>, EngineError> {
    params.check()?;
    let h = params.hidden_size();
    let n = packing.total_rows();
    if input.rows() != n || input.cols() != params.input_size() {
        return Err(EngineError::Shape(format!(
            "lstm input {:?}, expected [{n}, {}]",
            input.shape(),
            params.input_size()
        )));
    }
    let mut gates = Tensor::zeros(n, 4 * h);
    for r in 0..n {
        gates.row_mut(r).copy_from_slice(params.bias.value.data());
    }
    gemm(
        n,
        input.cols(),
        4 * h,
        F::one(),
        input.data(),
        Op::N,
        params.input.value.data(),
        Op::N,
        F::one(),
        gates.data_mut(),
    );
    let mut cells = Tensor::zeros(n, h);
    let mut tanh_cells = Tensor::zeros(n, h);
    let mut hidden = Tensor::zeros(n, h);
    for t in 0..packing.steps() {
        let b = packing.batch_size(t);
        let off = packing.offset(t);
        if t > 0 {
            let prev = packing.offset(t - 1);
            gemm(
                b,
                h,
                4 * h,
                F::one(),
                hidden.rows_slice(prev, prev + b),
                Op::N,
                params.recurrent.value.data(),
                Op::N,
                F::one(),
                gates.rows_slice_mut(off, off + b),
            );
        }
        for j in 0..b {
            let r = off + j;
            let (done, cur) = cells.data_mut().split_at_mut(r * h);
            let cell_prev = if t > 0 {
                let p = packing.offset(t - 1) + j;
                Some(&done[p * h..(p + 1) * h])
            } else {
                None
            };
            activate_row(
                gates.row_mut(r),
                cell_prev,
                &mut cur[..h],
                tanh_cells.row_mut(r),
                hidden.row_mut(r),
            );
        }
    }
    Ok(LstmTrace {
        gates,
        cells,
        tanh_cells,
        hidden,
    })
}

/// Backpropagation through time. Accumulates parameter gradients and returns
/// the gradient with respect to the packed input.
pub fn lstm_backward<F: Scalar>(
    params: &mut LstmParams<F>,
    input: &Tensor<F>,
    trace: &LstmTrace<F>,
    d_hidden: &Tensor<F>,
    packing: &Packing,
) -> Tensor<F> {
    let h = params.hidden_size();
    let n = packing.total_rows();
    assert_eq!(d_hidden.shape(), [n, h], "hidden gradient shape");
    let mut d_gates = Tensor::zeros(n, 4 * h);
    let width = if packing.steps() > 0 {
        packing.batch_size(0)
    } else {
        0
    };
    let mut carry_h = vec![F::zero(); width * h];
    let mut carry_c = vec![F::zero(); width * h];
    let one = F::one();
    for t in (0..packing.steps()).rev() {
        let b = packing.batch_size(t);
        let off = packing.offset(t);
        for j in 0..b {
            let r = off + j;
            let g = trace.gates.row(r);
            let (ig, fg, gg, og) = (&g[..h], &g[h..2 * h], &g[2 * h..3 * h], &g[3 * h..]);
            let tc = trace.tanh_cells.row(r);
            let c_prev = if t > 0 {
                Some(trace.cells.row(packing.offset(t - 1) + j))
            } else {
                None
            };
            let dh_up = d_hidden.row(r);
            let dg_row = d_gates.row_mut(r);
            for k in 0..h {
                let dh = dh_up[k] + carry_h[j * h + k];
                let dc = carry_c[j * h + k] + dh * og[k] * (one - tc[k] * tc[k]);
                let cp = c_prev.map_or(F::zero(), |c| c[k]);
                dg_row[k] = dc * gg[k] * ig[k] * (one - ig[k]);
                dg_row[h + k] = dc * cp * fg[k] * (one - fg[k]);
                dg_row[2 * h + k] = dc * ig[k] * (one - gg[k] * gg[k]);
                dg_row[3 * h + k] = dh * tc[k] * og[k] * (one - og[k]);
                carry_c[j * h + k] = dc * fg[k];
            }
        }
        if t > 0 {
            let prev_b = packing.batch_size(t - 1);
            let prev = packing.offset(t - 1);
            // Sequences that end at t - 1 receive no gradient from the future.
            carry_c[b * h..prev_b * h]
                .iter_mut()
                .for_each(|x| *x = F::zero());
            gemm(
                b,
                4 * h,
                h,
                one,
                d_gates.rows_slice(off, off + b),
                Op::N,
                params.recurrent.value.data(),
                Op::T,
                F::zero(),
                &mut carry_h[..b * h],
            );
            carry_h[b * h..prev_b * h]
                .iter_mut()
                .for_each(|x| *x = F::zero());
            gemm(
                h,
                b,
                4 * h,
                one,
                trace.hidden.rows_slice(prev, prev + b),
                Op::T,
                d_gates.rows_slice(off, off + b),
                Op::N,
                one,
                params.recurrent.grad.data_mut(),
            );
        }
    }
    let k = input.cols();
    gemm(
        k,
        n,
        4 * h,
        one,
        input.data(),
        Op::T,
        d_gates.data(),
        Op::N,
        one,
        params.input.grad.data_mut(),
    );
    add_column_sums(&d_gates, params.bias.grad.data_mut());
    let mut dx = Tensor::zeros(n, k);
    gemm(
        n,
        4 * h,
        k,
        one,
        d_gates.data(),
        Op::N,
        params.input.value.data(),
        Op::T,
        F::zero(),
        dx.data_mut(),
    );
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn packing_layout() {
        let p = Packing::from_sorted_lengths(&[3, 2, 2, 1]).unwrap();
        assert_eq!(p.steps(), 3);
        assert_eq!(
            (p.batch_size(0), p.batch_size(1), p.batch_size(2)),
            (4, 3, 1)
        );
        assert_eq!(p.total_rows(), 8);
        assert_eq!(p.row(1, 2), 6);
        assert!(Packing::from_sorted_lengths(&[1, 2]).is_err());
        assert_eq!(Packing::from_sorted_lengths(&[]).unwrap().total_rows(), 0);
    }

    #[test]
    fn zero_weights_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = LstmParams::<f64>::new("l", 3, 4, &mut rng);
        p.input.value.fill(0.0);
        p.recurrent.value.fill(0.0);
        let x = Tensor::from_fn(2, 3, |r, c| (r + c) as f64);
        let (h, state) = lstm_step(&x, &LstmState::zeros(2, 4), &p).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(state.cell.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_keeps_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = 3;
        let mut p = LstmParams::<f64>::new("l", 2, h, &mut rng);
        p.input.value.fill(0.0);
        p.recurrent.value.fill(0.0);
        for k in 0..h {
            p.bias.value.set(0, k, -1000.0); // input gate closed
            p.bias.value.set(0, h + k, 1000.0); // forget gate open
        }
        let state = LstmState {
            hidden: Tensor::from_vec(1, h, vec![0.1, 0.2, 0.3]),
            cell: Tensor::from_vec(1, h, vec![0.5, -1.5, 2.0]),
        };
        let x = Tensor::from_vec(1, 2, vec![0.7, -0.2]);
        let (_, next) = lstm_step(&x, &state, &p).unwrap();
        assert_eq!(next.cell, state.cell);
    }

    #[test]
    fn packed_matches_single_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::<f64>::new("l", 3, 5, &mut rng);
        let lengths = [4usize, 2, 1];
        let packing = Packing::from_sorted_lengths(&lengths).unwrap();
        let input = Tensor::from_fn(packing.total_rows(), 3, |_, _| rng.random_range(-1.0..1.0));
        let trace = lstm_forward(&p, &input, &packing).unwrap();
        for (s, &len) in lengths.iter().enumerate() {
            let mut state = LstmState::zeros(1, 5);
            for t in 0..len {
                let x = Tensor::from_vec(1, 3, input.row(packing.row(t, s)).to_vec());
                let (h, next) = lstm_step(&x, &state, &p).unwrap();
                for k in 0..5 {
                    assert!((h.get(0, k) - trace.hidden.get(packing.row(t, s), k)).abs() < 1e-14);
                }
                state = next;
            }
        }
    }

    #[test]
    fn step_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LstmParams::<f64>::new("l", 3, 5, &mut rng);
        let x = Tensor::zeros(1, 4);
        assert!(matches!(
            lstm_step(&x, &LstmState::zeros(1, 5), &p),
            Err(EngineError::Shape(_))
        ));
        let x = Tensor::zeros(1, 3);
        assert!(lstm_step(&x, &LstmState::zeros(2, 5), &p).is_err());
    }
}
