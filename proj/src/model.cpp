#include "xkd/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "xkd/digest.hpp"

namespace xkd {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Var ParamStore::add(const std::string& name, Tensor init) {
    for (const auto& e : items)
        if (e.name == name) fail("ParamStore: duplicate parameter '" + name + "'");
    Var v(std::move(init), true);
    items.push_back({name, v});
    return v;
}

Var ParamStore::find(const std::string& name) const {
    for (const auto& e : items)
        if (e.name == name) return e.var;
    fail("ParamStore: no parameter '" + name + "'");
}

std::vector<Var> ParamStore::vars() const {
    std::vector<Var> out;
    out.reserve(items.size());
    for (const auto& e : items) out.push_back(e.var);
    return out;
}

int64_t ParamStore::count_scalars() const {
    int64_t n = 0;
    for (const auto& e : items) n += e.var.val().size();
    return n;
}

Tensor init_normal(std::vector<int> shape, int fan_in, double gain, uint64_t seed,
                   const std::string& name) {
    // Keyed by (seed, name) so parameter init is independent of declaration
    // order; adding a block leaves every other parameter untouched.
    Rng rng(seed ^ fnv1a(name));
    Tensor t(std::move(shape));
    const double sd = gain / std::sqrt(static_cast<double>(fan_in));
    for (auto& e : t.v) e = sd * rng.normal();
    return t;
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

Var DpeBlock::apply(const Var& feature) const {
    Var mask = vsigmoid(conv2d(feature, w, b));  // (N,1,H,W)
    return mul_mask(feature, mask);
}

Var MhraBlock::apply(const Var& feature) const {
    const Tensor& f = feature.val();
    const int H = f.dim(2), W = f.dim(3);
    Var tokens = to_tokens(feature);  // (N,S,C)
    Var attn = mhsa(token_proj(tokens, wq), token_proj(tokens, wk), token_proj(tokens, wv), heads);
    attn = from_tokens(token_proj(attn, wo), H, W);
    Var g = vsigmoid(gate);  // (C)
    return add(mul_channel(attn, g), mul_channel(feature, affine(g, -1.0, 1.0)));
}

Var DfpnBlock::apply(const Var& coarse, const Var& mid, const Var& fine) const {
    const Tensor& c = coarse.val();
    const Tensor& m = mid.val();
    const Tensor& f = fine.val();
    if (m.dim(2) != 2 * c.dim(2) || m.dim(3) != 2 * c.dim(3) || f.dim(2) != 2 * m.dim(2) ||
        f.dim(3) != 2 * m.dim(3))
        fail("dfpn: scales must be related by factor-2 spatial ratios");
    Var top = conv2d(coarse, lat_w[0], lat_b[0]);
    Var sum_mid = add(resize_bilinear(top, m.dim(2), m.dim(3)), conv2d(mid, lat_w[1], lat_b[1]));
    Var sum_fine = add(resize_bilinear(sum_mid, f.dim(2), f.dim(3)), conv2d(fine, lat_w[2], lat_b[2]));
    return conv2d(sum_fine, smooth_w, smooth_b);
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

static int norm_groups(int channels) { return std::min(8, channels); }

Model::Model(const BackboneConfig& config, const ModuleFlags& flags, uint64_t seed)
    : config_(config), flags_(flags) {
    if (config_.stage_widths.empty()) fail("build_model: no stages");
    if (config_.n_classes != 2) fail("build_model: only binary heads are supported");
    const bool teacher = config_.role == BackboneConfig::Role::teacher;
    if ((flags_.dpe || flags_.mhra) && !teacher)
        fail("build_model: dpe/mhra apply only to the teacher role");
    if (flags_.dfpn && teacher) fail("build_model: dfpn applies only to the student role");
    if (flags_.dfpn && config_.stage_widths.size() < 3)
        fail("build_model: dfpn needs at least three stages");
    const int min_size = 1 << config_.stage_widths.size();
    if (config_.input_size % min_size)
        fail("build_model: input size must be divisible by 2^stages");

    int cin = 1;
    for (size_t i = 0; i < config_.stage_widths.size(); ++i) {
        const int cout = config_.stage_widths[i];
        const std::string p = "stage" + std::to_string(i);
        Stage st;
        st.conv_w = params_.add(p + ".conv.w",
                                init_normal({cout, cin, 3, 3}, cin * 9, std::sqrt(2.0), seed, p + ".conv.w"));
        st.conv_b = params_.add(p + ".conv.b", Tensor({cout}, 0.0));
        st.gn_gamma = params_.add(p + ".gn.gamma", Tensor({cout}, 1.0));
        st.gn_beta = params_.add(p + ".gn.beta", Tensor({cout}, 0.0));
        st.groups = norm_groups(cout);
        stages_.push_back(st);
        cin = cout;
    }

    const int c_last = config_.stage_widths.back();
    if (flags_.dpe) {
        dpe_.w = params_.add("dpe.w", init_normal({1, c_last, 1, 1}, c_last, 1.0, seed, "dpe.w"));
        dpe_.b = params_.add("dpe.b", Tensor({1}, 0.0));
    }
    if (flags_.mhra) {
        if (c_last % mhra_.heads) fail("build_model: mhra heads must divide channels");
        for (const char* nm : {"wq", "wk", "wv", "wo"}) {
            Var v = params_.add(std::string("mhra.") + nm,
                                init_normal({c_last, c_last}, c_last, 1.0, seed, std::string("mhra.") + nm));
            if (!std::strcmp(nm, "wq")) mhra_.wq = v;
            else if (!std::strcmp(nm, "wk")) mhra_.wk = v;
            else if (!std::strcmp(nm, "wv")) mhra_.wv = v;
            else mhra_.wo = v;
        }
        mhra_.gate = params_.add("mhra.gate", Tensor({c_last}, 0.0));  // g starts at 0.5
    }
    int head_in = c_last;
    if (flags_.dfpn) {
        const size_t s = config_.stage_widths.size();
        const int fused = c_last;  // common width = last stage width
        const int srcs[3] = {config_.stage_widths[s - 1], config_.stage_widths[s - 2],
                             config_.stage_widths[s - 3]};
        for (int i = 0; i < 3; ++i) {
            const std::string p = "dfpn.lat" + std::to_string(i);
            dfpn_.lat_w[i] = params_.add(p + ".w", init_normal({fused, srcs[i], 1, 1}, srcs[i], 1.0, seed, p + ".w"));
            dfpn_.lat_b[i] = params_.add(p + ".b", Tensor({fused}, 0.0));
        }
        dfpn_.smooth_w = params_.add("dfpn.smooth.w",
                                     init_normal({fused, fused, 3, 3}, fused * 9, std::sqrt(2.0), seed, "dfpn.smooth.w"));
        dfpn_.smooth_b = params_.add("dfpn.smooth.b", Tensor({fused}, 0.0));
        head_in = fused;
    }
    head_w = params_.add("head.w", init_normal({config_.n_classes, head_in}, head_in, 1.0, seed, "head.w"));
    head_b = params_.add("head.b", Tensor({config_.n_classes}, 0.0));
}

Model build_model(const BackboneConfig& config, const ModuleFlags& flags, uint64_t seed) {
    return Model(config, flags, seed);
}

int Model::tap_channels() const {
    // Mechanism tap: deepest stage shared with the student depth-wise. With
    // the default 4-stage teacher / 3-stage student this is stage index 2 on
    // both sides, at equal spatial size.
    const size_t tap = std::min<size_t>(config_.stage_widths.size(), 3) - 1;
    return config_.stage_widths[tap];
}

ForwardOutput Model::forward(const Tensor& batch) const {
    if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != config_.input_size ||
        batch.dim(3) != config_.input_size)
        fail("Model::forward: expected (N,1," + std::to_string(config_.input_size) + "," +
             std::to_string(config_.input_size) + "), got " + batch.shape_str());

    ForwardOutput out;
    Var x = constant(batch);
    for (const auto& st : stages_) {
        x = avg_pool2(relu(group_norm(conv2d(x, st.conv_w, st.conv_b), st.gn_gamma, st.gn_beta, st.groups)));
        out.stage_features.push_back(x);
    }
    if (flags_.dpe) x = dpe_.apply(x);
    if (flags_.mhra) x = mhra_.apply(x);
    if (flags_.dpe || flags_.mhra) out.stage_features.back() = x;

    if (flags_.dfpn) {
        const size_t s = out.stage_features.size();
        out.fused_map = dfpn_.apply(out.stage_features[s - 1], out.stage_features[s - 2],
                                    out.stage_features[s - 3]);
        out.embedding = global_avg_pool(out.fused_map);
    } else {
        out.embedding = global_avg_pool(x);
    }
    out.logits = linear(out.embedding, head_w, head_b);
    out.attention_tap = static_cast<int>(std::min<size_t>(out.stage_features.size(), 3)) - 1;
    return out;
}

// ---------------------------------------------------------------------------
// Late fusion
// ---------------------------------------------------------------------------

LateFusionModel::LateFusionModel(const BackboneConfig& xray_config, const BackboneConfig& ct_config,
                                 uint64_t seed)
    : xray_config_(xray_config), ct_config_(ct_config) {
    auto build_branch = [&](const char* tag, const BackboneConfig& cfg, std::vector<Stage>& stages) {
        int cin = 1;
        for (size_t i = 0; i < cfg.stage_widths.size(); ++i) {
            const int cout = cfg.stage_widths[i];
            const std::string p = std::string(tag) + ".stage" + std::to_string(i);
            Stage st;
            st.conv_w = params_.add(p + ".conv.w",
                                    init_normal({cout, cin, 3, 3}, cin * 9, std::sqrt(2.0), seed, p + ".conv.w"));
            st.conv_b = params_.add(p + ".conv.b", Tensor({cout}, 0.0));
            st.gn_gamma = params_.add(p + ".gn.gamma", Tensor({cout}, 1.0));
            st.gn_beta = params_.add(p + ".gn.beta", Tensor({cout}, 0.0));
            st.groups = norm_groups(cout);
            stages.push_back(st);
            cin = cout;
        }
    };
    build_branch("xray", xray_config_, xray_stages_);
    build_branch("ct", ct_config_, ct_stages_);
    const int emb = xray_config_.stage_widths.back() + ct_config_.stage_widths.back();
    head_w = params_.add("fusion.head.w", init_normal({2, emb}, emb, 1.0, seed, "fusion.head.w"));
    head_b = params_.add("fusion.head.b", Tensor({2}, 0.0));
}

Var LateFusionModel::branch_embed(const Tensor& batch, const std::vector<Stage>& stages) const {
    Var x = constant(batch);
    for (const auto& st : stages)
        x = avg_pool2(relu(group_norm(conv2d(x, st.conv_w, st.conv_b), st.gn_gamma, st.gn_beta, st.groups)));
    return global_avg_pool(x);
}

Var LateFusionModel::forward(const Tensor& xray_batch, const Tensor& ct_batch) const {
    if (xray_batch.dim(0) != ct_batch.dim(0))
        fail("late_fusion_forward: X-ray and CT batches must pair up");
    Var xe = branch_embed(xray_batch, xray_stages_);
    Var ce = branch_embed(ct_batch, ct_stages_);
    return linear(concat_cols(xe, ce), head_w, head_b);
}

// ---------------------------------------------------------------------------
// Serialization: "XKDW", u32 n, then per parameter: name, shape, doubles.
// ---------------------------------------------------------------------------

template <typename T>
static void put(std::vector<uint8_t>& buf, const T& x) {
    const auto* p = reinterpret_cast<const uint8_t*>(&x);
    buf.insert(buf.end(), p, p + sizeof(T));
}

template <typename T>
static T take(const std::vector<uint8_t>& buf, size_t& pos) {
    if (pos + sizeof(T) > buf.size()) fail("weights: truncated stream");
    T x;
    std::memcpy(&x, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return x;
}

std::vector<uint8_t> serialize_params(const ParamStore& store) {
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), {'X', 'K', 'D', 'W'});
    put<uint32_t>(buf, static_cast<uint32_t>(store.items.size()));
    for (const auto& e : store.items) {
        put<uint32_t>(buf, static_cast<uint32_t>(e.name.size()));
        buf.insert(buf.end(), e.name.begin(), e.name.end());
        const Tensor& t = e.var.val();
        put<uint32_t>(buf, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) put<uint32_t>(buf, static_cast<uint32_t>(d));
        for (double x : t.v) put<double>(buf, x);
    }
    return buf;
}

void deserialize_params(ParamStore& store, const std::vector<uint8_t>& bytes) {
    size_t pos = 0;
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "XKDW", 4) != 0) fail("weights: bad magic");
    pos = 4;
    const uint32_t n = take<uint32_t>(bytes, pos);
    if (n != store.items.size()) fail("weights: parameter count mismatch");
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t name_len = take<uint32_t>(bytes, pos);
        if (pos + name_len > bytes.size()) fail("weights: truncated name");
        std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
        pos += name_len;
        auto& entry = store.items[i];
        if (entry.name != name) fail("weights: parameter order mismatch at '" + name + "'");
        const uint32_t rank = take<uint32_t>(bytes, pos);
        std::vector<int> shape;
        for (uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<int>(take<uint32_t>(bytes, pos)));
        Tensor& t = entry.var.val();
        if (shape != t.shape) fail("weights: shape mismatch for '" + name + "'");
        for (auto& x : t.v) x = take<double>(bytes, pos);
    }
    if (pos != bytes.size()) fail("weights: trailing bytes");
}

std::vector<uint8_t> Model::serialize() const { return serialize_params(params_); }
void Model::deserialize(const std::vector<uint8_t>& bytes) { deserialize_params(params_, bytes); }

static void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

static std::vector<uint8_t> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void Model::save(const std::string& path) const { write_bytes(path, serialize()); }
void Model::load(const std::string& path) { deserialize(read_bytes(path)); }

std::string Model::weights_digest() const {
    auto bytes = serialize();
    return sha256_hex(bytes.data(), bytes.size());
}

std::vector<uint8_t> LateFusionModel::serialize() const { return serialize_params(params_); }
void LateFusionModel::save(const std::string& path) const { write_bytes(path, serialize()); }
std::string LateFusionModel::weights_digest() const {
    auto bytes = serialize();
    return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace xkd
