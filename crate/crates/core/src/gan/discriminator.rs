use super::{get, init_block, one_hot, resnet_block, uniform_init, GeneratorSpec, ParamMap, VarMap, LEAKY_SLOPE};
use crate::error::{contract, Result};
use crate::tensor::{ConvConfig, Element, Graph, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscBlock {
    pub fin: usize,
    pub fout: usize,
    pub downsample: bool,
}

/// Downsampling ResNet discriminator mirroring a generator. Outputs one
/// logit per sample, picked from a per-label head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub img_channels: usize,
    pub resolution: usize,
    pub first_channels: usize,
    pub blocks: Vec<DiscBlock>,
    pub final_channels: usize,
    pub final_res: usize,
    pub n_labels: usize,
}

impl DiscriminatorSpec {
    pub fn mirror(g: &GeneratorSpec) -> DiscriminatorSpec {
        let mut chans = vec![g.base_channels];
        chans.extend(g.blocks.iter().map(|b| b.channels));
        let n = g.blocks.len();
        let blocks = (1..=n)
            .rev()
            .map(|i| DiscBlock { fin: chans[i], fout: chans[i - 1], downsample: g.blocks[i - 1].upsample })
            .collect();
        DiscriminatorSpec {
            img_channels: g.img_channels,
            resolution: g.resolution(),
            first_channels: chans[n],
            blocks,
            final_channels: g.base_channels,
            final_res: g.base_res,
            n_labels: g.n_labels,
        }
    }

    pub fn init_psi<T: crate::tensor::Element>(&self, seed: u64) -> ParamMap<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamMap::new();
        let c = self.first_channels;
        p.insert("img.w".into(), uniform_init(&[c, self.img_channels, 3, 3], self.img_channels * 9, &mut rng));
        p.insert("img.b".into(), uniform_init(&[c], self.img_channels * 9, &mut rng));
        for (i, b) in self.blocks.iter().enumerate() {
            init_block(&mut p, &format!("b{}", i), b.fin, b.fout, &mut rng);
        }
        let feat = self.final_channels * self.final_res * self.final_res;
        p.insert("fc.w".into(), uniform_init(&[self.n_labels, feat], feat, &mut rng));
        p.insert("fc.b".into(), uniform_init(&[self.n_labels], feat, &mut rng));
        p
    }
}

/// Logits `[B]` for images `[B, C, H, W]`.
pub fn discriminator_forward<T: Element>(
    g: &mut Graph<T>,
    spec: &DiscriminatorSpec,
    psi: &VarMap,
    x: Var,
    labels: Option<&[usize]>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let want = [spec.img_channels, spec.resolution, spec.resolution];
    if s.len() != 4 || s[1..] != want {
        return Err(contract(format!("discriminator expects [B, {:?}], got {:?}", want, s)));
    }
    let b = s[0];
    let w = get(psi, "img.w")?;
    let bias = get(psi, "img.b")?;
    let mut h = g.conv2d(x, w, Some(bias), ConvConfig::same(1, 3))?;
    for (i, blk) in spec.blocks.iter().enumerate() {
        h = resnet_block(g, psi, &format!("b{}", i), h, blk.fin, blk.fout, |_, _, v| Ok(v))?;
        if blk.downsample {
            h = g.avg_pool2(h)?;
        }
    }
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let h = g.reshape(h, &[b, spec.final_channels * spec.final_res * spec.final_res])?;
    let fw = get(psi, "fc.w")?;
    let fb = get(psi, "fc.b")?;
    let out = g.dense(h, fw, Some(fb))?;
    if spec.n_labels == 1 {
        return g.reshape(out, &[b]);
    }
    let zeros;
    let labels = match labels {
        Some(l) => l,
        None => {
            zeros = vec![0; b];
            &zeros
        }
    };
    if labels.len() != b {
        return Err(contract(format!("{} labels for batch of {}", labels.len(), b)));
    }
    let mask = g.constant(one_hot(labels, spec.n_labels)?);
    let picked = g.mul(out, mask)?;
    g.sum_axis1(picked)
}
