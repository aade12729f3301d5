use latent_depth::gate::{derive_rng, sample_soft_rng};
use latent_depth::model::*;
use latent_depth::tape::Tape;

fn main() {
    let batch = PaddedBatch {
        batch: 4, src_len: 5, tgt_len: 5,
        src: vec![4,5,9,0,0, 6,7,8,10,0, 11,4,6,8,9, 5,5,7,0,0],
        tgt_in: vec![1,4,5,9,0, 1,6,7,8,10, 1,11,4,6,8, 1,5,5,7,0],
        tgt_out: vec![4,5,9,2,0, 6,7,8,10,2, 11,4,6,8,2, 5,5,7,2,0],
        pad: 0,
    };
    for seed in [7u64, 17, 2024] {
        let mut cfg = StackConfig::toy(1, 24, 12);
        cfg.norm_mode = NormMode::NoNorm;
        cfg.encoder_gating = GatingMode::Static;
        let params = ModelParameters::init(&cfg, seed);
        let ones = vec![1.0; 24];
        let run = |gates: &[f64]| -> (f64, f64, f64, f64) {
            let mut tape = Tape::new();
            let nodes = register_params(&mut tape, &params);
            let tr = forward_seq2seq(&mut tape, &nodes, &cfg, &batch, StackGates::Fixed(&[1.0]), StackGates::Fixed(gates));
            let nll = sequence_nll(&mut tape, tr.logits, &batch);
            let grads = tape.backward(nll);
            let norms = layer_gradient_norms(&grads, &nodes, &cfg, StackId::Decoder, &tr.dec_states);
            (norms.param_norms[0], norms.param_norms[23], norms.activation_norms[0], norms.activation_norms[24])
        };
        let (s0, s23, sx0, sxl) = run(&ones);
        let mut rng = derive_rng(seed, &[41]);
        let soft: Vec<f64> = (0..24).map(|_| sample_soft_rng((0.0,0.0), 1.0, &mut rng)).collect();
        let (l0, l23, lx0, lxl) = run(&soft);
        println!("seed {}: static p0 {:.3e} p23 {:.3e} ratio {:.3e} | latent p0 {:.3e} p23 {:.3e} ratio {:.3e}", seed, s0, s23, s0/s23, l0, l23, l0/l23);
        println!("         static x0 {:.3e} xL {:.3e} | latent x0 {:.3e} xL {:.3e}", sx0, sxl, lx0, lxl);
    }
}
