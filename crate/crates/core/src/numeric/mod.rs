//! Dense numeric substrate: matrices, layers, a reverse-mode tape and the
//! finite-difference oracle used by the gradient checks.

pub mod attention;
pub mod fd;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionBlockParams, AttentionBlockVars};
pub use fd::{finite_diff_grad, relative_error};
pub use mlp::{mlp_forward, Activation, Layer, MlpParams, MlpVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2;

/// Named parameter tensors, visited in a fixed order.
///
/// The order is shared by checkpoints, tape bindings and the optimizer.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor2));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}
