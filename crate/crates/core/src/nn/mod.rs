// SPDX-License-Identifier: Apache-2.0

//! Dense f64 tensors with a reverse-mode tape and the layers built on it.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use layers::{Activation, GruCell, Linear, Mlp};
pub use optim::{PlateauSchedule, Sgd};
pub use params::{read_checkpoint, write_checkpoint, Grads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
