//! Block hooks for the methods that insert modules on the backbone stream.

use crate::backbone::{BlockHook, BlockSite, Projection, Sublayer};
use crate::error::Result;
use crate::peft::adapters::{
    adaptformer_forward, lora_update, standard_adapter_forward, AdaptFormerAdapter, DenseAdapter,
    LoraParams,
};
use crate::peft::registry::Bound;
use crate::real::Real;
use crate::tape::{Owner, Tape, Tensor};

fn as_adapter<T: Real>(
    tape: &mut Tape<T>,
    f: impl FnOnce(&mut Tape<T>) -> Result<Tensor>,
) -> Result<Option<Tensor>> {
    let prev = tape.set_owner(Owner::Adapter);
    let r = f(tape);
    tape.set_owner(prev);
    r.map(Some)
}

/// Serial adapters behind the MSA and behind the MLP of every block.
pub struct SerialAdapterHook<'a> {
    pub adapters: &'a [[DenseAdapter; 2]],
    pub bound: &'a Bound,
}

impl<T: Real> BlockHook<T> for SerialAdapterHook<'_> {
    fn inserting(&self) -> bool {
        true
    }

    fn on_sublayer(
        &mut self,
        tape: &mut Tape<T>,
        site: BlockSite,
        which: Sublayer,
        _stream: &Tensor,
        out: &Tensor,
    ) -> Result<Option<Tensor>> {
        let p = &self.adapters[site.index][which as usize];
        as_adapter(tape, |t| standard_adapter_forward(t, p, self.bound, out))
    }
}

/// Low-rank updates on the query and value projections.
pub struct LoraHook<'a> {
    /// `[query, value]` per block.
    pub lora: &'a [[LoraParams; 2]],
    pub bound: &'a Bound,
}

impl<T: Real> BlockHook<T> for LoraHook<'_> {
    fn inserting(&self) -> bool {
        true
    }

    fn on_projection(
        &mut self,
        tape: &mut Tape<T>,
        site: BlockSite,
        which: Projection,
        x: &Tensor,
        out: &Tensor,
    ) -> Result<Option<Tensor>> {
        let slot = match which {
            Projection::Query => 0,
            Projection::Value => 1,
            Projection::Key => return Ok(None),
        };
        let p = &self.lora[site.index][slot];
        as_adapter(tape, |t| lora_update(t, p, self.bound, x, out))
    }
}

/// Gated bottlenecks parallel to the MSA and the MLP, reading the sublayer's
/// stream input.
pub struct AdaptFormerHook<'a> {
    pub adapters: &'a [[AdaptFormerAdapter; 2]],
    pub bound: &'a Bound,
}

impl<T: Real> BlockHook<T> for AdaptFormerHook<'_> {
    fn inserting(&self) -> bool {
        true
    }

    fn on_sublayer(
        &mut self,
        tape: &mut Tape<T>,
        site: BlockSite,
        which: Sublayer,
        stream: &Tensor,
        out: &Tensor,
    ) -> Result<Option<Tensor>> {
        let p = &self.adapters[site.index][which as usize];
        as_adapter(tape, |t| adaptformer_forward(t, p, self.bound, stream, out))
    }
}
