use magnet_da::autodiff::{Mode, Tape};
use magnet_da::data::{generate_shapes, Domain, DomainPair};
use magnet_da::losses::{total_loss, KernelSpec};
use magnet_da::network::{MagnetModel, NetworkConfig, TransitionType};
use magnet_da::tensor::Tensor;
use std::time::Instant;

fn main() {
    let cfg = NetworkConfig {
        num_blocks: 2,
        layers_per_block: 2,
        growth_rate: 4,
        stem_channels: 8,
        tap_fc_dim: 16,
        transition_type: TransitionType::B,
        ..NetworkConfig::new(1, 32, 6)
    };
    let mut model = MagnetModel::new(cfg, 1).unwrap();
    let src = generate_shapes(Domain::Cad, 6, 16, 32, 1).unwrap();
    let tgt = generate_shapes(Domain::Photo, 6, 16, 32, 2).unwrap();
    let pair = DomainPair::new(src, tgt).unwrap();
    let bs = 8usize;
    let batch = {
        let mut data = Vec::new();
        for i in 0..bs { data.extend_from_slice(pair.source().image(i)); }
        for i in 0..bs { data.extend_from_slice(pair.target().image(i)); }
        Tensor::from_vec(vec![2*bs, 1, 32, 32], data).unwrap()
    };
    let labels: Vec<usize> = (0..bs).map(|i| pair.source().labels.as_ref().unwrap()[i] as usize).collect();
    let kernel = KernelSpec::MedianHeuristic;

    let mut t_fwd = 0.0; let mut t_loss = 0.0; let mut t_bwd = 0.0;
    let reps = 20;
    for round in 0..(reps + 3) {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, Mode::Train).unwrap();
        let fwd = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let fs_src = tape.slice_rows(out.fs_logits, 0, bs).unwrap();
        let ft_tgt = tape.slice_rows(out.ft_probs, bs, bs).unwrap();
        let mut tap_pairs = Vec::new();
        for tap in out.taps.clone() {
            let zs = tape.slice_rows(tap, 0, bs).unwrap();
            let zt = tape.slice_rows(tap, bs, bs).unwrap();
            tap_pairs.push((zs, zt));
        }
        let (loss, _) = total_loss(&mut tape, fs_src, &labels, ft_tgt, &tap_pairs, &kernel, 1.0, 1.0).unwrap();
        let lo = t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        model.params_mut().zero_grads();
        tape.backward(loss, model.params_mut()).unwrap();
        let bw = t2.elapsed().as_secs_f64();
        if round >= 3 { t_fwd += fwd; t_loss += lo; t_bwd += bw; }
    }
    println!("forward: {:.2} ms  loss: {:.2} ms  backward: {:.2} ms  total: {:.2} ms",
        t_fwd*1000.0/reps as f64, t_loss*1000.0/reps as f64, t_bwd*1000.0/reps as f64,
        (t_fwd+t_loss+t_bwd)*1000.0/reps as f64);
}
