//! Two server rounds by hand.
//!
//! Three clients upload dense factor deltas. The server averages their
//! products, projects onto the adapter rank and answers with a `B` update
//! in round 1 and an `A` update in round 2, each with 80% of its entries
//! randomly dropped.

use fedsrd::seed::rng_from;
use fedsrd::server::{srd_round, LayerStats};
use fedsrd::wire::{ClientUpdate, LayerPayload};
use fedsrd::{ClientMirror, DenseMatrix, GlobalState, LoraPair, Mode, SparseDelta};

pub fn run_example() -> fedsrd::Result<Vec<LayerStats>> {
    let mut rng = rng_from(5);
    let (d, r, m) = (24, 4, 3);
    let start = LoraPair::new(
        DenseMatrix::random_gaussian(d, r, 0.1, &mut rng),
        DenseMatrix::random_gaussian(r, d, 0.5, &mut rng),
    )?;
    let mut state = GlobalState::new(vec![start.clone()], Mode::Full);
    let mut mirrors: Vec<_> = (0..m).map(|i| ClientMirror::new(i, vec![start.clone()])).collect();

    let mut all = Vec::new();
    for round in 1..=2u64 {
        let uploads: Vec<ClientUpdate> = (0..m)
            .map(|i| ClientUpdate {
                client_id: i,
                layers: vec![LayerPayload::both(
                    SparseDelta::from_dense(&DenseMatrix::random_gaussian(d, r, 0.05, &mut rng)),
                    SparseDelta::from_dense(&DenseMatrix::random_gaussian(r, d, 0.05, &mut rng)),
                )],
            })
            .collect();
        let out = srd_round(&state, &mut mirrors, &uploads, 0.8, round, 0.1)?;
        for mirror in &mut mirrors {
            mirror.apply_download(&out.download)?;
        }
        let s = out.stats[0];
        let sent = &out.download.layers[0];
        let (name, part) = match (&sent.b, &sent.a) {
            (Some(b), None) => ("B", b),
            (None, Some(a)) => ("A", a),
            _ => unreachable!("one factor per round"),
        };
        println!(
            "round {round}: update {name}, {} of {} entries sent, residual {:.4} of |w_diff| {:.4}",
            part.nnz(),
            part.rows() * part.cols(),
            s.residual,
            s.w_diff_norm
        );
        all.push(s);
        state = out.state;
    }
    Ok(all)
}

fn main() -> fedsrd::Result<()> {
    run_example()?;
    Ok(())
}
