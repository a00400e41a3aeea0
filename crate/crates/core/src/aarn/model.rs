use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Params};
use crate::tensor::{kernels, Real, Rng, Tape, Tensor, Var};

/// Channel widths of the attention block and the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AarnArch {
    /// Width of both convolutions inside the recurrent attention unit.
    pub attention: usize,
    /// Layer 1.
    pub enc1: usize,
    /// Layer 2 (stride 2).
    pub enc2: usize,
    /// Layers 3 to 6.
    pub deep: usize,
    /// Layers 7 and 8.
    pub dec7: usize,
    /// Layer 9.
    pub dec9: usize,
}

impl Default for AarnArch {
    fn default() -> Self {
        AarnArch {
            attention: 32,
            enc1: 32,
            enc2: 64,
            deep: 64,
            dec7: 32,
            dec9: 16,
        }
    }
}

impl AarnArch {
    /// Four channels everywhere; small enough for finite-difference checks.
    pub fn micro() -> Self {
        AarnArch {
            attention: 4,
            enc1: 4,
            enc2: 4,
            deep: 4,
            dec7: 4,
            dec9: 4,
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "aarn/att{}/e{}-{}/d{}/u{}-{}",
            self.attention, self.enc1, self.enc2, self.deep, self.dec7, self.dec9
        )
    }
}

/// Smallest accepted input side.
pub const MIN_SIDE: usize = 32;

/// Initial attention map value.
pub const ATTENTION_PRIOR: f64 = 0.5;

/// Two-step recurrent attention followed by a 10-layer contextual autoencoder.
#[derive(Clone, Debug)]
pub struct AarnModel<T: Real = f32> {
    arch: AarnArch,
    params: Params<T>,
    att_in: Conv,
    att_mid: Conv,
    att_head: Conv,
    layers: [Conv; 10],
    side5: Conv,
    side7: Conv,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AarnVars<'t, T: Real> {
    pub a1: Var<'t, T>,
    pub a2: Var<'t, T>,
    /// Side output at quarter resolution.
    pub f5: Var<'t, T>,
    /// Side output at half resolution.
    pub f7: Var<'t, T>,
    /// Full-resolution output; also the finest side output.
    pub out: Var<'t, T>,
}

impl<T: Real> AarnModel<T> {
    pub fn new(arch: AarnArch, rng: &mut Rng) -> Result<Self> {
        let a = arch;
        let mut params = Params::new();
        let p = &mut params;
        let att_in = Conv::new(p, "att.conv1", 2, a.attention, 3, 1, rng)?;
        let att_mid = Conv::new(p, "att.conv2", a.attention, a.attention, 3, 1, rng)?;
        let att_head = Conv::new(p, "att.head", a.attention, 1, 3, 1, rng)?;
        let layers = [
            Conv::new(p, "ae.l1", 2, a.enc1, 3, 1, rng)?,
            Conv::new(p, "ae.l2", a.enc1, a.enc2, 3, 2, rng)?,
            Conv::new(p, "ae.l3", a.enc2, a.deep, 3, 2, rng)?,
            Conv::new(p, "ae.l4", a.deep, a.deep, 3, 1, rng)?,
            Conv::new(p, "ae.l5", a.deep, a.deep, 3, 1, rng)?,
            Conv::new(p, "ae.l6", a.deep, a.deep, 3, 1, rng)?,
            Conv::new(p, "ae.l7", a.deep + a.enc2, a.dec7, 3, 1, rng)?,
            Conv::new(p, "ae.l8", a.dec7, a.dec7, 3, 1, rng)?,
            Conv::new(p, "ae.l9", a.dec7 + a.enc1, a.dec9, 3, 1, rng)?,
            Conv::new(p, "ae.l10", a.dec9, 1, 3, 1, rng)?,
        ];
        let side5 = Conv::new(p, "side5", a.deep, 1, 1, 1, rng)?;
        let side7 = Conv::new(p, "side7", a.dec7, 1, 1, 1, rng)?;
        Ok(AarnModel {
            arch,
            params,
            att_in,
            att_mid,
            att_head,
            layers,
            side5,
            side7,
        })
    }

    pub fn arch(&self) -> AarnArch {
        self.arch
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> AarnModel<U> {
        AarnModel {
            arch: self.arch,
            params: self.params.cast(),
            att_in: self.att_in,
            att_mid: self.att_mid,
            att_head: self.att_head,
            layers: self.layers,
            side5: self.side5,
            side7: self.side7,
        }
    }

    fn attention_step<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        image: Var<'t, T>,
        prev: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let x = tape.concat_channels(image, prev)?;
        let c1 = tape.relu(self.att_in.forward(tape, p, x)?)?;
        let c2 = self.att_mid.forward(tape, p, c1)?;
        let r = tape.relu(tape.add(c1, c2)?)?;
        tape.sigmoid(self.att_head.forward(tape, p, r)?)
    }

    /// Forward pass over a `B x 1 x H x W` batch with `H`, `W` divisible by 4.
    ///
    /// With `attention` off both maps are the constant prior and the
    /// attention weights are not touched.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        image: Var<'t, T>,
        attention: bool,
    ) -> Result<AarnVars<'t, T>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::dim(format!(
                "expected B x 1 x H x W input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::dim(format!(
                "forward needs sides divisible by 4, got {h}x{w}"
            )));
        }
        let prior = tape.constant(Tensor::full(&shape, T::lit(ATTENTION_PRIOR)));
        let (a1, a2) = if attention {
            let a1 = self.attention_step(tape, p, image, prior)?;
            (a1, self.attention_step(tape, p, image, a1)?)
        } else {
            (prior, prior)
        };

        let l = &self.layers;
        let relu_conv =
            |i: usize, x| -> Result<Var<'t, T>> { tape.relu(l[i].forward(tape, p, x)?) };
        let x = tape.concat_channels(image, a2)?;
        let e1 = relu_conv(0, x)?;
        let e2 = relu_conv(1, e1)?;
        let e3 = relu_conv(2, e2)?;
        let e4 = relu_conv(3, e3)?;
        let d5 = relu_conv(4, e4)?;
        let f5 = tape.sigmoid(self.side5.forward(tape, p, d5)?)?;
        let d6 = relu_conv(5, tape.upsample_nearest_2x(d5)?)?;
        let d7 = relu_conv(6, tape.concat_channels(d6, e2)?)?;
        let f7 = tape.sigmoid(self.side7.forward(tape, p, d7)?)?;
        let d8 = relu_conv(7, tape.upsample_nearest_2x(d7)?)?;
        let d9 = relu_conv(8, tape.concat_channels(d8, e1)?)?;
        let out = tape.sigmoid(l[9].forward(tape, p, d9)?)?;
        Ok(AarnVars {
            a1,
            a2,
            f5,
            f7,
            out,
        })
    }
}

/// Output of full-image inference, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub output: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

impl<T: Real> AarnModel<T> {
    /// Runs the network on one `height x width` plane of normalized values,
    /// reflect-padding to a multiple of 4 and cropping the result back.
    pub fn predict(
        &self,
        values: &[f64],
        width: usize,
        height: usize,
        attention: bool,
    ) -> Result<Prediction> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::Size(format!(
                "input {width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        let input = Tensor::new(
            &[1, 1, height, width],
            values.iter().map(|&v| T::lit(v)).collect(),
        )?;
        let (pad_h, pad_w) = ((4 - height % 4) % 4, (4 - width % 4) % 4);
        let input = kernels::reflect_pad(&input, pad_h, pad_w)?;
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let x = tape.constant(input);
        let vars = self.forward(&tape, &bound, x, attention)?;
        let plane = |v: Var<'_, T>| -> Result<Vec<f64>> {
            let t = kernels::crop(&tape.value(v), height, width)?;
            Ok(t.data()
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN))
                .collect())
        };
        Ok(Prediction {
            width,
            height,
            output: plane(vars.out)?,
            a1: plane(vars.a1)?,
            a2: plane(vars.a2)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_inventory() {
        let m = AarnModel::<f32>::new(AarnArch::default(), &mut Rng::new(0)).unwrap();
        let autoencoder = m
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("ae.") && n.ends_with(".kernel"));
        let out_channels: Vec<usize> = autoencoder.map(|(_, t)| t.shape()[0]).collect();
        assert_eq!(out_channels, vec![32, 64, 64, 64, 64, 64, 32, 32, 16, 1]);
        let l9 = m
            .params()
            .iter()
            .find(|(n, _)| *n == "ae.l9.kernel")
            .unwrap()
            .1;
        assert_eq!(l9.shape(), &[16, 64, 3, 3]);
    }

    #[test]
    fn shapes_and_ranges() {
        let m = AarnModel::<f32>::new(AarnArch::micro(), &mut Rng::new(1)).unwrap();
        let tape = Tape::new();
        let p = m.params().bind_frozen(&tape);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 32, 32], |i| (i % 7) as f32 / 7.0));
        let v = m.forward(&tape, &p, x, true).unwrap();
        assert_eq!(v.out.shape(), vec![2, 1, 32, 32]);
        assert_eq!(v.a1.shape(), vec![2, 1, 32, 32]);
        assert_eq!(v.f7.shape(), vec![2, 1, 16, 16]);
        assert_eq!(v.f5.shape(), vec![2, 1, 8, 8]);
        for var in [v.a1, v.a2, v.out, v.f5, v.f7] {
            assert!(var.value().data().iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn disabled_attention_is_constant_prior() {
        let m = AarnModel::<f32>::new(AarnArch::micro(), &mut Rng::new(2)).unwrap();
        let pred = m.predict(&vec![0.3; 36 * 40], 40, 36, false).unwrap();
        assert!(pred.a2.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn pad_and_crop_shapes() {
        let m = AarnModel::<f32>::new(AarnArch::micro(), &mut Rng::new(3)).unwrap();
        for (h, w) in [(32, 32), (36, 36), (250, 254), (33, 35)] {
            let pred = m.predict(&vec![0.5; h * w], w, h, true).unwrap();
            assert_eq!(pred.output.len(), h * w);
            assert_eq!(pred.a1.len(), h * w);
        }
        assert!(matches!(
            m.predict(&[0.5; 31 * 40], 40, 31, true),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn rejects_bad_shapes() {
        let m = AarnModel::<f32>::new(AarnArch::micro(), &mut Rng::new(4)).unwrap();
        let tape = Tape::new();
        let p = m.params().bind_frozen(&tape);
        let x = tape.constant(Tensor::zeros(&[1, 1, 34, 32]));
        assert!(m.forward(&tape, &p, x, true).is_err());
    }
}
