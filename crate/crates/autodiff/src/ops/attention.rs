use crate::error::{dim_err, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Additive attention energies
    /// `score[b,n] = Σ_a w[a] · tanh(enc[b,n,a] + dec[b,a])`.
    ///
    /// `enc` holds the already-projected encoder states `[B×N×A]`, `dec` the
    /// projected decoder state `[B×A]` and `w` the scoring vector `[A]`. The
    /// `[B×N×A]` activation is recomputed during the backward pass instead
    /// of being stored.
    pub fn additive_scores(&mut self, enc: Var, dec: Var, w: Var) -> Result<Var> {
        let (se, sd, sw) = (self.shape(enc), self.shape(dec), self.shape(w));
        if se.len() != 3 || sd.len() != 2 || se[0] != sd[0] || se[2] != sd[1] || sw != [se[2]] {
            return dim_err(
                "additive_scores",
                format!("enc {se:?}, dec {sd:?}, w {sw:?} are inconsistent"),
            );
        }
        let (b, n, a) = (se[0], se[1], se[2]);
        let (e, d, wv) = (self.value(enc).data(), self.value(dec).data(), self.value(w).data());
        let mut out = vec![0.0; b * n];
        for bi in 0..b {
            let drow = &d[bi * a..][..a];
            for ni in 0..n {
                let erow = &e[(bi * n + ni) * a..][..a];
                out[bi * n + ni] = erow
                    .iter()
                    .zip(drow)
                    .zip(wv)
                    .map(|((&x, &y), &k)| k * (x + y).tanh())
                    .sum();
            }
        }
        let v = Tensor::new(&[b, n], out)?;
        Ok(self.push(v, Op::AdditiveScores { enc, dec, w }))
    }
}

pub(crate) fn additive_scores_backward(enc: Var, dec: Var, w: Var, g: &[f64], sink: &mut GradSink<'_>) {
    let se = sink.value(enc).shape();
    let (b, n, a) = (se[0], se[1], se[2]);
    let (e, d, wv) = (
        sink.value(enc).data(),
        sink.value(dec).data(),
        sink.value(w).data(),
    );
    let mut dpre = vec![0.0; b * n * a];
    let mut dw = vec![0.0; a];
    for bi in 0..b {
        let drow = &d[bi * a..][..a];
        for ni in 0..n {
            let gs = g[bi * n + ni];
            let off = (bi * n + ni) * a;
            for k in 0..a {
                let t = (e[off + k] + drow[k]).tanh();
                dw[k] += gs * t;
                dpre[off + k] = gs * wv[k] * (1.0 - t * t);
            }
        }
    }
    if let Some(gw) = sink.get(w) {
        gw.iter_mut().zip(&dw).for_each(|(x, &v)| *x += v);
    }
    if let Some(gd) = sink.get(dec) {
        for bi in 0..b {
            for ni in 0..n {
                let src = &dpre[(bi * n + ni) * a..][..a];
                gd[bi * a..][..a].iter_mut().zip(src).for_each(|(x, &v)| *x += v);
            }
        }
    }
    if let Some(ge) = sink.get(enc) {
        ge.iter_mut().zip(&dpre).for_each(|(x, &v)| *x += v);
    }
}
