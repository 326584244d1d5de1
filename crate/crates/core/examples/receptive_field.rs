//! Maps which input pixels one output pixel of the deformable reception
//! stage depends on, with the predicted offsets held fixed.
//!
//!     cargo run --release --example receptive_field

use deeppyramid::blocks::{Dpr, DprConfig};
use deeppyramid::deform::shared_tri_branch;
use deeppyramid::nn::{Ctx, Init, ParamStore};
use deeppyramid::rng::{self, Domain};
use deeppyramid::{Tape, Tensor};

fn main() -> deeppyramid::Result<()> {
    let n = 19;
    let c = n / 2;
    let mut cfg = DprConfig::new(2, 2, 2);
    cfg.offset_init = Init::ScaledHe(0.3);
    let mut store = ParamStore::<f64>::new();
    let block = Dpr::new(&mut store, &mut rng::stream(0, Domain::Init, 0), "dpr", cfg)?;
    let mut r = rng::stream(0, Domain::Test, 0);
    let x = Tensor::from_fn(&[1, 4, n, n], |_| rng::normal(&mut r));

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false, false);
    let xv = tape.leaf(x, true);
    let rec = block.reception(&ctx, xv)?;
    let (o3, o6) = (
        tape.constant((*rec.offsets3.value()).clone()),
        tape.constant((*rec.offsets6.value()).clone()),
    );
    let w = ctx.param(block.value.weight);
    let tri = shared_tri_branch(&xv, &w, None, &o3, &o6)?;
    let [a, b, d] = tri.as_array();
    let total = a.add(&b)?.add(&d)?;
    let mut probe = Tensor::zeros(&total.shape());
    probe.data_mut()[c * n + c] = 1.0;
    tape.backward_with_seed(total, probe)?;
    let g = xv.grad().expect("input gradient");

    // '#' marks input pixels with a nonzero gradient, 'o' the probed pixel.
    for y in 0..n {
        let row: String = (0..n)
            .map(|x| {
                let hit = (0..4).any(|ch| g.at4(0, ch, y, x) != 0.0);
                match (y == c && x == c, hit) {
                    (true, _) => 'o',
                    (false, true) => '#',
                    _ => '.',
                }
            })
            .collect();
        println!("{row}");
    }
    Ok(())
}
