#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mitoseg/layers.hpp"

namespace mitoseg {

// The five ablation variants (module-flag rows): encoders built from plain
// DSC stacks or DSCR blocks, decoder fusion from CBAM, CBAM+GRU or CSAG.
enum class SegVariant { dsc_cbam, dsc_cbam_gru, dscrb_cbam, dscrb_cbam_gru, dscrb_csag };

inline SegVariant seg_variant_from_string(const std::string& s) {
    if (s == "dsc_cbam") return SegVariant::dsc_cbam;
    if (s == "dsc_cbam_gru") return SegVariant::dsc_cbam_gru;
    if (s == "dscrb_cbam") return SegVariant::dscrb_cbam;
    if (s == "dscrb_cbam_gru") return SegVariant::dscrb_cbam_gru;
    if (s == "dscrb_csag") return SegVariant::dscrb_csag;
    throw ConfigError("unknown segnet variant '" + s +
                      "' (expected dsc_cbam, dsc_cbam_gru, dscrb_cbam, dscrb_cbam_gru or dscrb_csag)");
}

inline std::string to_string(SegVariant v) {
    switch (v) {
        case SegVariant::dsc_cbam: return "dsc_cbam";
        case SegVariant::dsc_cbam_gru: return "dsc_cbam_gru";
        case SegVariant::dscrb_cbam: return "dscrb_cbam";
        case SegVariant::dscrb_cbam_gru: return "dscrb_cbam_gru";
        case SegVariant::dscrb_csag: return "dscrb_csag";
    }
    return "?";
}

struct SegConfig {
    int base_width = 32;
    int attention_reduction = 8;
    SegVariant variant = SegVariant::dscrb_csag;
    bool use_batchnorm = true;
    bool swap_gru_roles = false;  // default: encoder attention is the GRU input
    int spatial_gate_kernel = 1;
    std::uint64_t init_seed = 1234;
};

// --- attention building blocks ---------------------------------------------

// CBAM: shared-MLP channel attention plus 7x7 spatial attention. One module
// per skip level, applied to both the encoder and decoder features.
struct Cbam {
    LinearLayer mlp1, mlp2;
    Conv2dLayer spatial;

    static Cbam make(ParamRegistry& reg, const std::string& name, int channels, int reduction, Rng& rng) {
        Cbam c;
        const int hidden = std::max(1, channels / std::max(1, reduction));
        c.mlp1 = LinearLayer::make(reg, name + ".mlp1", channels, hidden, rng);
        c.mlp2 = LinearLayer::make(reg, name + ".mlp2", hidden, channels, rng);
        c.spatial = Conv2dLayer::make(reg, name + ".spatial", 2, 1, 7, 1, true, rng);
        return c;
    }

    Tensor channel_map(const Tensor& x) const {
        const int N = x.dim(0), C = x.dim(1);
        Tensor ga = reshape(pooled_reduction(x, Reduce::global_avg), {N, C});
        Tensor gm = reshape(pooled_reduction(x, Reduce::global_max), {N, C});
        Tensor sa = mlp2.forward(relu(mlp1.forward(ga)));
        Tensor sm = mlp2.forward(relu(mlp1.forward(gm)));
        return reshape(sigmoid(add(sa, sm)), {N, C, 1, 1});
    }

    Tensor spatial_map(const Tensor& x) const {
        Tensor cat = concat_channels({pooled_reduction(x, Reduce::channel_avg),
                                      pooled_reduction(x, Reduce::channel_max)});
        return sigmoid(spatial.forward(cat));
    }

    // full CBAM refinement: x * channel map * spatial map
    Tensor refine(const Tensor& x) const {
        return mul_broadcast(mul_broadcast(x, channel_map(x)), spatial_map(x));
    }
};

// Single-step convolutional GRU; gates are kxk convolutions (1x1 by default).
struct ConvGru {
    Conv2dLayer wz, uz, wr, ur, wh, uh;

    static ConvGru make(ParamRegistry& reg, const std::string& name, int channels, int k, Rng& rng) {
        ConvGru g;
        g.wz = Conv2dLayer::make(reg, name + ".wz", channels, channels, k, 1, true, rng);
        g.uz = Conv2dLayer::make(reg, name + ".uz", channels, channels, k, 1, false, rng);
        g.wr = Conv2dLayer::make(reg, name + ".wr", channels, channels, k, 1, true, rng);
        g.ur = Conv2dLayer::make(reg, name + ".ur", channels, channels, k, 1, false, rng);
        g.wh = Conv2dLayer::make(reg, name + ".wh", channels, channels, k, 1, true, rng);
        g.uh = Conv2dLayer::make(reg, name + ".uh", channels, channels, k, 1, false, rng);
        return g;
    }

    // z = sig(Wz*x + Uz*h), r = sig(Wr*x + Ur*h),
    // h~ = tanh(Wh*x + Uh*(r.h)), out = (1-z).h + z.h~
    Tensor fuse(const Tensor& x, const Tensor& h) const {
        detail::check_same_shape(x, h, "gru_fuse");
        Tensor z = sigmoid(add(wz.forward(x), uz.forward(h)));
        Tensor r = sigmoid(add(wr.forward(x), ur.forward(h)));
        Tensor hh = tanh(add(wh.forward(x), uh.forward(mul(r, h))));
        return add(mul(affine(z, -1.0f, 1.0f), h), mul(z, hh));
    }
};

// Channel-spatial attention gate: GRU-fused attention descriptors modulate
// the summed features, (E + D) * CF * SF.
struct Csag {
    Cbam cbam;
    ConvGru channel_gru;
    ConvGru spatial_gru;
    bool swap_roles = false;

    static Csag make(ParamRegistry& reg, const std::string& name, int channels, int reduction,
                     int spatial_kernel, bool swap_roles, Rng& rng) {
        Csag c;
        c.cbam = Cbam::make(reg, name + ".cbam", channels, reduction, rng);
        c.channel_gru = ConvGru::make(reg, name + ".cgru", channels, 1, rng);
        c.spatial_gru = ConvGru::make(reg, name + ".sgru", 1, spatial_kernel, rng);
        c.swap_roles = swap_roles;
        return c;
    }

    Tensor fuse(const Tensor& enc, const Tensor& dec) const {
        Tensor ce = cbam.channel_map(enc);
        Tensor cd = cbam.channel_map(dec);
        Tensor cf = swap_roles ? channel_gru.fuse(cd, ce) : channel_gru.fuse(ce, cd);
        Tensor se = cbam.spatial_map(enc);
        Tensor sd = cbam.spatial_map(dec);
        Tensor sf = swap_roles ? spatial_gru.fuse(sd, se) : spatial_gru.fuse(se, sd);
        return mul_broadcast(mul_broadcast(add(enc, dec), cf), sf);
    }
};

// --- encoder blocks ---------------------------------------------------------

// DSCRB_a: downsampling residual block. Plain 3x3 stride-2 first, depthwise
// separable second, 1x1 stride-2 projection on the shortcut.
struct DscrbA {
    Conv2dLayer conv1;
    BatchNormLayer bn1;
    DSCLayer conv2;
    BatchNormLayer bn2;
    Conv2dLayer shortcut;
    BatchNormLayer bn_sc;

    static DscrbA make(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, bool bn,
                       Rng& rng) {
        DscrbA b;
        b.conv1 = Conv2dLayer::make(reg, name + ".conv1", in_ch, out_ch, 3, 2, !bn, rng);
        b.bn1 = BatchNormLayer::make(reg, name + ".bn1", out_ch, bn);
        b.conv2 = DSCLayer::make(reg, name + ".conv2", out_ch, out_ch, 1, !bn, rng);
        b.bn2 = BatchNormLayer::make(reg, name + ".bn2", out_ch, bn);
        b.shortcut = Conv2dLayer::make(reg, name + ".shortcut", in_ch, out_ch, 1, 2, !bn, rng);
        b.bn_sc = BatchNormLayer::make(reg, name + ".bn_sc", out_ch, bn);
        return b;
    }

    Tensor forward(const Tensor& x, bool training) {
        Tensor main = relu(bn1.forward(conv1.forward(x), training));
        main = bn2.forward(conv2.forward(main), training);
        Tensor sc = bn_sc.forward(shortcut.forward(x), training);
        return relu(add(main, sc));
    }
};

// DSCRB_b: extent-preserving residual block, both convolutions depthwise
// separable, identity shortcut (1x1 projection only if the channel count
// changes).
struct DscrbB {
    DSCLayer conv1, conv2;
    BatchNormLayer bn1, bn2;
    std::optional<Conv2dLayer> proj;
    std::optional<BatchNormLayer> bn_proj;

    static DscrbB make(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, bool bn,
                       Rng& rng) {
        DscrbB b;
        b.conv1 = DSCLayer::make(reg, name + ".conv1", in_ch, out_ch, 1, !bn, rng);
        b.bn1 = BatchNormLayer::make(reg, name + ".bn1", out_ch, bn);
        b.conv2 = DSCLayer::make(reg, name + ".conv2", out_ch, out_ch, 1, !bn, rng);
        b.bn2 = BatchNormLayer::make(reg, name + ".bn2", out_ch, bn);
        if (in_ch != out_ch) {
            b.proj = Conv2dLayer::make(reg, name + ".proj", in_ch, out_ch, 1, 1, !bn, rng);
            b.bn_proj = BatchNormLayer::make(reg, name + ".bn_proj", out_ch, bn);
        }
        return b;
    }

    Tensor forward(const Tensor& x, bool training) {
        Tensor main = relu(bn1.forward(conv1.forward(x), training));
        main = bn2.forward(conv2.forward(main), training);
        Tensor sc = proj ? bn_proj->forward(proj->forward(x), training) : x;
        return relu(add(main, sc));
    }
};

// Plain DSC encoder level for the dsc_* ablation rows: stride-2 DSC followed
// by a stride-1 DSC, no residual path.
struct DscDown {
    DSCLayer conv1, conv2;
    BatchNormLayer bn1, bn2;

    static DscDown make(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch, bool bn,
                        Rng& rng) {
        DscDown b;
        b.conv1 = DSCLayer::make(reg, name + ".conv1", in_ch, out_ch, 2, !bn, rng);
        b.bn1 = BatchNormLayer::make(reg, name + ".bn1", out_ch, bn);
        b.conv2 = DSCLayer::make(reg, name + ".conv2", out_ch, out_ch, 1, !bn, rng);
        b.bn2 = BatchNormLayer::make(reg, name + ".bn2", out_ch, bn);
        return b;
    }

    Tensor forward(const Tensor& x, bool training) {
        Tensor y = relu(bn1.forward(conv1.forward(x), training));
        return relu(bn2.forward(conv2.forward(y), training));
    }
};

// --- decoder ----------------------------------------------------------------

struct DecoderLevel {
    Conv2dLayer proj;  // 1x1 channel-halving after bilinear upsampling
    BatchNormLayer bn_proj;
    SegVariant variant;
    std::optional<Cbam> cbam;      // cbam / cbam_gru fusion
    std::optional<ConvGru> gru;    // cbam_gru fusion
    std::optional<Csag> csag;      // csag fusion
    DSCLayer dsc1, dsc2;
    BatchNormLayer bn_d1, bn_d2;

    static DecoderLevel make(ParamRegistry& reg, const std::string& name, int in_ch, int out_ch,
                             const SegConfig& cfg, Rng& rng) {
        DecoderLevel d;
        d.variant = cfg.variant;
        d.proj = Conv2dLayer::make(reg, name + ".proj", in_ch, out_ch, 1, 1, !cfg.use_batchnorm, rng);
        d.bn_proj = BatchNormLayer::make(reg, name + ".bn_proj", out_ch, cfg.use_batchnorm);
        switch (cfg.variant) {
            case SegVariant::dsc_cbam:
            case SegVariant::dscrb_cbam:
                d.cbam = Cbam::make(reg, name + ".cbam", out_ch, cfg.attention_reduction, rng);
                break;
            case SegVariant::dsc_cbam_gru:
            case SegVariant::dscrb_cbam_gru:
                d.cbam = Cbam::make(reg, name + ".cbam", out_ch, cfg.attention_reduction, rng);
                d.gru = ConvGru::make(reg, name + ".gru", out_ch, 1, rng);
                break;
            case SegVariant::dscrb_csag:
                d.csag = Csag::make(reg, name + ".csag", out_ch, cfg.attention_reduction,
                                    cfg.spatial_gate_kernel, cfg.swap_gru_roles, rng);
                break;
        }
        d.dsc1 = DSCLayer::make(reg, name + ".dsc1", out_ch, out_ch, 1, !cfg.use_batchnorm, rng);
        d.bn_d1 = BatchNormLayer::make(reg, name + ".bn_d1", out_ch, cfg.use_batchnorm);
        d.dsc2 = DSCLayer::make(reg, name + ".dsc2", out_ch, out_ch, 1, !cfg.use_batchnorm, rng);
        d.bn_d2 = BatchNormLayer::make(reg, name + ".bn_d2", out_ch, cfg.use_batchnorm);
        return d;
    }

    Tensor fuse(const Tensor& enc, const Tensor& dec) const {
        switch (variant) {
            case SegVariant::dsc_cbam:
            case SegVariant::dscrb_cbam:
                return add(cbam->refine(enc), cbam->refine(dec));
            case SegVariant::dsc_cbam_gru:
            case SegVariant::dscrb_cbam_gru:
                return gru->fuse(cbam->refine(enc), cbam->refine(dec));
            case SegVariant::dscrb_csag:
                return csag->fuse(enc, dec);
        }
        throw ConfigError("unreachable fusion variant");
    }

    Tensor forward(const Tensor& below, const Tensor& skip, bool training) {
        Tensor up = bilinear_upsample_2x(below);
        Tensor d = relu(bn_proj.forward(proj.forward(up), training));
        require_shape(d.shape() == skip.shape(), "decoder/skip shape mismatch: " + shape_str(d.shape()) +
                                                     " vs " + shape_str(skip.shape()));
        Tensor f = fuse(skip, d);
        f = relu(bn_d1.forward(dsc1.forward(f), training));
        return relu(bn_d2.forward(dsc2.forward(f), training));
    }
};

// --- the full network --------------------------------------------------------

struct SegModel {
    SegConfig cfg;
    ParamRegistry reg;
    bool training = false;

    Conv2dLayer enc1a, enc1b;
    BatchNormLayer bn1a, bn1b;
    std::vector<DscrbA> enc_a;   // dscrb_* variants, levels 2..4
    std::vector<DscrbB> enc_b;
    std::vector<DscDown> enc_d;  // dsc_* variants, levels 2..4
    std::vector<DecoderLevel> dec;  // bottom-up: fuses E3, E2, E1
    Conv2dLayer head;

    void set_train(bool t) { training = t; }

    // encoder features E1..E4; widths base, 2b, 4b, 8b; three stride-2 steps
    std::vector<Tensor> encode(const Tensor& x) {
        std::vector<Tensor> e;
        Tensor h = relu(bn1a.forward(enc1a.forward(x), training));
        h = relu(bn1b.forward(enc1b.forward(h), training));
        e.push_back(h);
        for (int lvl = 0; lvl < 3; ++lvl) {
            if (!enc_a.empty()) {
                h = enc_a[static_cast<std::size_t>(lvl)].forward(h, training);
                h = enc_b[static_cast<std::size_t>(lvl)].forward(h, training);
            } else {
                h = enc_d[static_cast<std::size_t>(lvl)].forward(h, training);
            }
            e.push_back(h);
        }
        return e;
    }

    Tensor forward(const Tensor& x) {
        require_shape(x.ndim() == 4 && x.dim(1) == 3,
                      "segnet expects an Nx3xHxW batch, got " + shape_str(x.shape()));
        require_shape(x.dim(2) % 8 == 0 && x.dim(3) % 8 == 0,
                      "segnet input extents must be divisible by 8 (three downsamplings), got " +
                          shape_str(x.shape()) + "; pad or tile the input explicitly");
        auto e = encode(x);
        Tensor d = e[3];
        d = dec[0].forward(d, e[2], training);
        d = dec[1].forward(d, e[1], training);
        d = dec[2].forward(d, e[0], training);
        return sigmoid(head.forward(d));
    }
};

inline SegModel build_segnet(const SegConfig& cfg) {
    if (cfg.base_width < 1) throw ConfigError("segnet base_width must be positive");
    if (cfg.attention_reduction < 1) throw ConfigError("segnet attention_reduction must be positive");
    SegModel m;
    m.cfg = cfg;
    Rng rng(cfg.init_seed);
    const int b = cfg.base_width;
    const bool bn = cfg.use_batchnorm;
    const bool residual = cfg.variant == SegVariant::dscrb_cbam ||
                          cfg.variant == SegVariant::dscrb_cbam_gru ||
                          cfg.variant == SegVariant::dscrb_csag;

    m.enc1a = Conv2dLayer::make(m.reg, "enc1.conv1", 3, b, 3, 1, !bn, rng);
    m.bn1a = BatchNormLayer::make(m.reg, "enc1.bn1", b, bn);
    m.enc1b = Conv2dLayer::make(m.reg, "enc1.conv2", b, b, 3, 1, !bn, rng);
    m.bn1b = BatchNormLayer::make(m.reg, "enc1.bn2", b, bn);

    const int widths[4] = {b, 2 * b, 4 * b, 8 * b};
    for (int lvl = 0; lvl < 3; ++lvl) {
        const std::string name = "enc" + std::to_string(lvl + 2);
        if (residual) {
            m.enc_a.push_back(DscrbA::make(m.reg, name + ".a", widths[lvl], widths[lvl + 1], bn, rng));
            m.enc_b.push_back(DscrbB::make(m.reg, name + ".b", widths[lvl + 1], widths[lvl + 1], bn, rng));
        } else {
            m.enc_d.push_back(DscDown::make(m.reg, name, widths[lvl], widths[lvl + 1], bn, rng));
        }
    }
    for (int lvl = 0; lvl < 3; ++lvl) {
        const std::string name = "dec" + std::to_string(3 - lvl);
        m.dec.push_back(DecoderLevel::make(m.reg, name, widths[3 - lvl], widths[2 - lvl], cfg, rng));
    }
    m.head = Conv2dLayer::make(m.reg, "head", b, 1, 1, 1, true, rng);
    return m;
}

// Architecture echo: config plus the parameter manifest.
inline std::string segnet_manifest(const SegModel& m) {
    std::ostringstream os;
    os << "segnet variant=" << to_string(m.cfg.variant) << " base_width=" << m.cfg.base_width
       << " attention_reduction=" << m.cfg.attention_reduction
       << " use_batchnorm=" << (m.cfg.use_batchnorm ? 1 : 0)
       << " swap_gru_roles=" << (m.cfg.swap_gru_roles ? 1 : 0)
       << " spatial_gate_kernel=" << m.cfg.spatial_gate_kernel << "\n";
    os << m.reg.manifest();
    return os.str();
}

}  // namespace mitoseg
