use rand::Rng;

use super::{BatchNorm2d, Conv2d, Init, Module, Param, Relu, Tensor};

/// Convolution (no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, k: usize, stride: usize, init: Init, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, k, stride, k / 2, false, init, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            relu: Relu::default(),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        Relu::infer(&self.bn.infer(&self.conv.infer(x)))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.conv.forward(x);
        let y = self.bn.forward(&y);
        self.relu.forward(&y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Projection shortcut used when a residual block changes shape.
#[derive(Debug, Clone)]
struct Shortcut {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl Shortcut {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 1, stride, 0, false, Init::He, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        self.bn.infer(&self.conv.infer(x))
    }

    fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.conv.forward(x);
        self.bn.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.bn.backward(dy);
        self.conv.backward(&d)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Two 3x3 convolutions with an identity or projection skip.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    first: ConvBnRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<Shortcut>,
    relu: Relu,
}

impl BasicBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            first: ConvBnRelu::new(&format!("{name}.a"), cin, cout, 3, stride, Init::He, rng),
            conv2: Conv2d::same3(&format!("{name}.b.conv"), cout, cout, false, Init::He, rng),
            bn2: BatchNorm2d::new(&format!("{name}.b.bn"), cout),
            shortcut: (stride != 1 || cin != cout).then(|| Shortcut::new(&format!("{name}.skip"), cin, cout, stride, rng)),
            relu: Relu::default(),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let y = self.bn2.infer(&self.conv2.infer(&self.first.infer(x)));
        let skip = match &self.shortcut {
            Some(s) => s.infer(x),
            None => x.clone(),
        };
        Relu::infer(&(y + skip))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.first.forward(x);
        let y = self.conv2.forward(&y);
        let y = self.bn2.forward(&y);
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        self.relu.forward(&(y + skip))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.relu.backward(dy);
        let dmain = self.bn2.backward(&d);
        let dmain = self.conv2.backward(&dmain);
        let dmain = self.first.backward(&dmain);
        let dskip = match &mut self.shortcut {
            Some(s) => s.backward(&d),
            None => d,
        };
        dmain + dskip
    }
}

impl Module for BasicBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.first.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some(s) = &self.shortcut {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(f);
        }
    }
}

/// ResNet bottleneck: 1x1 reduce, 3x3 (strided), 1x1 expand by 4.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    reduce: ConvBnRelu,
    spatial: ConvBnRelu,
    expand: Conv2d,
    bn: BatchNorm2d,
    shortcut: Option<Shortcut>,
    relu: Relu,
}

impl Bottleneck {
    pub const EXPANSION: usize = 4;

    pub fn new<R: Rng + ?Sized>(name: &str, cin: usize, mid: usize, stride: usize, rng: &mut R) -> Self {
        let cout = mid * Self::EXPANSION;
        Self {
            reduce: ConvBnRelu::new(&format!("{name}.reduce"), cin, mid, 1, 1, Init::He, rng),
            spatial: ConvBnRelu::new(&format!("{name}.spatial"), mid, mid, 3, stride, Init::He, rng),
            expand: Conv2d::pointwise(&format!("{name}.expand.conv"), mid, cout, false, Init::He, rng),
            bn: BatchNorm2d::new(&format!("{name}.expand.bn"), cout),
            shortcut: (stride != 1 || cin != cout).then(|| Shortcut::new(&format!("{name}.skip"), cin, cout, stride, rng)),
            relu: Relu::default(),
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let y = self.bn.infer(&self.expand.infer(&self.spatial.infer(&self.reduce.infer(x))));
        let skip = match &self.shortcut {
            Some(s) => s.infer(x),
            None => x.clone(),
        };
        Relu::infer(&(y + skip))
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.reduce.forward(x);
        let y = self.spatial.forward(&y);
        let y = self.expand.forward(&y);
        let y = self.bn.forward(&y);
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        self.relu.forward(&(y + skip))
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.relu.backward(dy);
        let m = self.bn.backward(&d);
        let m = self.expand.backward(&m);
        let m = self.spatial.backward(&m);
        let m = self.reduce.backward(&m);
        let s = match &mut self.shortcut {
            Some(s) => s.backward(&d),
            None => d,
        };
        m + s
    }
}

impl Module for Bottleneck {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.reduce.visit(f);
        self.spatial.visit(f);
        self.expand.visit(f);
        self.bn.visit(f);
        if let Some(s) = &self.shortcut {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.reduce.visit_mut(f);
        self.spatial.visit_mut(f);
        self.expand.visit_mut(f);
        self.bn.visit_mut(f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(f);
        }
    }
}
