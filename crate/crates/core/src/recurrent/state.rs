use crate::scalar::Real;
use crate::tensor::Tensor;

/// Hidden map `h` and cell map `c` of one ConvLSTM layer, both `[B,H',W',C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    /// Whether gradients may flow back into this state.
    pub attached: bool,
}

impl<T: Real> ConvLstmState<T> {
    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        let shape = [batch, height, width, channels];
        ConvLstmState {
            h: Tensor::zeros(&shape),
            c: Tensor::zeros(&shape),
            attached: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.h.shape()
    }

    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    /// Zeroes the rows whose flag is set; other rows keep their values.
    pub fn reset_rows(&mut self, rows: &[bool]) {
        let per = self.h.len() / self.batch();
        for (b, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
            self.h.data_mut()[b * per..(b + 1) * per].fill(T::zero());
            self.c.data_mut()[b * per..(b + 1) * per].fill(T::zero());
        }
    }

    pub fn is_zero(&self) -> bool {
        self.h.data().iter().chain(self.c.data()).all(|v| v.is_zero())
    }
}

/// All-zero state of the same shape, detached.
pub fn reset_state<T: Real>(state: &ConvLstmState<T>) -> ConvLstmState<T> {
    ConvLstmState {
        h: state.h.zeros_like(),
        c: state.c.zeros_like(),
        attached: false,
    }
}

/// Same values; backward passes treat it as a constant.
pub fn detach_state<T: Real>(state: &ConvLstmState<T>) -> ConvLstmState<T> {
    let mut out = state.clone();
    out.h.drop_grad();
    out.c.drop_grad();
    out.attached = false;
    out
}
