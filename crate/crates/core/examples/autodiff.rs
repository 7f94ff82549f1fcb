//! Reverse-mode autodiff on a tiny conv net: check the gradients against
//! finite differences, then fit it to a random target with SGD.

use nanonas::tensor::gradcheck::check_gradients;
use nanonas::tensor::{Graph, ParamStore, Sgd, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nanonas::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::randn([2, 1, 6, 6], 1.0, &mut rng);
    let w = Tensor::<f64>::randn([3, 1, 3, 3], 0.5, &mut rng);
    let fw = Tensor::<f64>::randn([2, 48], 0.2, &mut rng);

    let check = check_gradients(&[x.clone(), w.clone(), fw.clone()], 1e-6, |g, v| {
        let y = g.conv2d(v[0], v[1], [1, 1], [0, 0])?;
        let y = g.relu(y)?;
        let y = g.flatten(y)?;
        let y = g.fully_connected(y, v[2], None)?;
        g.sum(y)
    })?;
    println!("gradient check: {} entries, max rel err {:.2e}", check.checked, check.max_rel_err);

    let mut params = ParamStore::new();
    let wid = params.add("conv", w.cast::<f32>())?;
    let fid = params.add("fc", fw.cast::<f32>())?;
    let x = x.cast::<f32>();
    let target = Tensor::<f32>::randn([2, 2], 1.0, &mut rng);
    let mut opt = Sgd::new(0.01, 0.5);
    for step in 0..100 {
        let (loss, grads) = {
            let mut g = Graph::with_params(&params);
            let xv = g.input(x.clone());
            let tv = g.input(target.clone());
            let (wv, fv) = (g.param(wid)?, g.param(fid)?);
            let y = g.conv2d(xv, wv, [1, 1], [0, 0])?;
            let y = g.relu(y)?;
            let y = g.flatten(y)?;
            let y = g.fully_connected(y, fv, None)?;
            let loss = g.l1_loss(y, tv)?;
            (g.value(loss).item()?, g.backward(loss)?)
        };
        params.zero_grad();
        params.accumulate(&grads)?;
        opt.step(&mut params)?;
        if step % 20 == 0 {
            println!("step {step:>2}  l1 {loss:.4}");
        }
    }
    Ok(())
}
