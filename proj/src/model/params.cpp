#include "backchain/model/params.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "backchain/errors.hpp"

namespace backchain::model {

std::string to_string(Norm norm) { return norm == Norm::PreLn ? "preln" : "none"; }

Norm norm_from_string(const std::string& s) {
    if (s == "none") return Norm::None;
    if (s == "preln") return Norm::PreLn;
    throw InvalidArgument("unknown norm: " + s);
}

ModelConfig ModelConfig::for_task(int n_nodes, int layers, int d_model, int d_ff) {
    ModelConfig c;
    c.layers = layers;
    c.d_model = d_model;
    c.d_ff = d_ff;
    c.vocab = 2 * n_nodes + 3;
    c.context = 4 * n_nodes - 1;
    return c;
}

namespace {

template <typename S, typename Fn>
void enumerate(ParametersT<S>& p, Fn&& fn) {
    const bool ln = p.config.norm == Norm::PreLn;
    auto mat = [&](const std::string& name, Mat<S>& m) {
        fn(name, m.d.data(), m.d.size(), std::vector<int>{m.rows, m.cols});
    };
    auto vec = [&](const std::string& name, std::vector<S>& v) {
        fn(name, v.data(), v.size(), std::vector<int>{static_cast<int>(v.size())});
    };
    mat("embed.w", p.w_embed);
    mat("pos.w", p.w_pos);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l + 1) + ".";
        auto& lp = p.layers[l];
        if (ln) {
            vec(pre + "ln1.g", lp.ln1_g);
            vec(pre + "ln1.b", lp.ln1_b);
        }
        mat(pre + "attn.wq", lp.w_q);
        vec(pre + "attn.bq", lp.b_q);
        mat(pre + "attn.wk", lp.w_k);
        vec(pre + "attn.bk", lp.b_k);
        mat(pre + "attn.wv", lp.w_v);
        vec(pre + "attn.bv", lp.b_v);
        mat(pre + "attn.wo", lp.w_o);
        vec(pre + "attn.bo", lp.b_o);
        if (ln) {
            vec(pre + "ln2.g", lp.ln2_g);
            vec(pre + "ln2.b", lp.ln2_b);
        }
        mat(pre + "mlp.win", lp.w_in);
        vec(pre + "mlp.bin", lp.b_in);
        mat(pre + "mlp.wout", lp.w_out);
        vec(pre + "mlp.bout", lp.b_out);
    }
    if (ln) {
        vec("lnf.g", p.lnf_g);
        vec("lnf.b", p.lnf_b);
    }
    mat("unembed.w", p.w_unembed);
}

}  // namespace

template <typename S>
std::vector<TensorRef<S>> ParametersT<S>::tensors() {
    std::vector<TensorRef<S>> out;
    enumerate(*this, [&](const std::string& name, S* data, size_t n, std::vector<int> shape) {
        out.push_back({name, data, n, std::move(shape)});
    });
    return out;
}

template <typename S>
std::vector<TensorRef<const S>> ParametersT<S>::tensors() const {
    std::vector<TensorRef<const S>> out;
    enumerate(const_cast<ParametersT<S>&>(*this),
              [&](const std::string& name, S* data, size_t n, std::vector<int> shape) {
                  out.push_back({name, data, n, std::move(shape)});
              });
    return out;
}

template <typename S>
size_t ParametersT<S>::parameter_count() const {
    size_t total = 0;
    for (const auto& t : tensors()) total += t.size;
    return total;
}

template <typename S>
template <typename T>
ParametersT<T> ParametersT<S>::cast() const {
    ParametersT<T> out;
    out.config = config;
    out.w_embed = w_embed.template cast<T>();
    out.w_pos = w_pos.template cast<T>();
    out.w_unembed = w_unembed.template cast<T>();
    auto cast_vec = [](const std::vector<S>& v) {
        std::vector<T> o(v.size());
        for (size_t i = 0; i < v.size(); ++i) o[i] = static_cast<T>(v[i]);
        return o;
    };
    out.lnf_g = cast_vec(lnf_g);
    out.lnf_b = cast_vec(lnf_b);
    for (const auto& lp : layers) {
        LayerParamsT<T> ol;
        ol.w_q = lp.w_q.template cast<T>();
        ol.w_k = lp.w_k.template cast<T>();
        ol.w_v = lp.w_v.template cast<T>();
        ol.w_o = lp.w_o.template cast<T>();
        ol.w_in = lp.w_in.template cast<T>();
        ol.w_out = lp.w_out.template cast<T>();
        ol.b_q = cast_vec(lp.b_q);
        ol.b_k = cast_vec(lp.b_k);
        ol.b_v = cast_vec(lp.b_v);
        ol.b_o = cast_vec(lp.b_o);
        ol.b_in = cast_vec(lp.b_in);
        ol.b_out = cast_vec(lp.b_out);
        ol.ln1_g = cast_vec(lp.ln1_g);
        ol.ln1_b = cast_vec(lp.ln1_b);
        ol.ln2_g = cast_vec(lp.ln2_g);
        ol.ln2_b = cast_vec(lp.ln2_b);
        out.layers.push_back(std::move(ol));
    }
    return out;
}

template <typename S>
ParametersT<S> allocate_params(const ModelConfig& config) {
    config.validate();
    ParametersT<S> p;
    p.config = config;
    const int d = config.d_model, ff = config.d_ff;
    p.w_embed = Mat<S>(config.vocab, d);
    p.w_pos = Mat<S>(config.context, d);
    p.w_unembed = Mat<S>(d, config.vocab);
    const bool ln = config.norm == Norm::PreLn;
    if (ln) {
        p.lnf_g.assign(static_cast<size_t>(d), S(1));
        p.lnf_b.assign(static_cast<size_t>(d), S(0));
    }
    for (int l = 0; l < config.layers; ++l) {
        LayerParamsT<S> lp;
        lp.w_q = Mat<S>(d, d);
        lp.w_k = Mat<S>(d, d);
        lp.w_v = Mat<S>(d, d);
        lp.w_o = Mat<S>(d, d);
        lp.b_q.assign(static_cast<size_t>(d), S(0));
        lp.b_k.assign(static_cast<size_t>(d), S(0));
        lp.b_v.assign(static_cast<size_t>(d), S(0));
        lp.b_o.assign(static_cast<size_t>(d), S(0));
        lp.w_in = Mat<S>(d, ff);
        lp.w_out = Mat<S>(ff, d);
        lp.b_in.assign(static_cast<size_t>(ff), S(0));
        lp.b_out.assign(static_cast<size_t>(d), S(0));
        if (ln) {
            lp.ln1_g.assign(static_cast<size_t>(d), S(1));
            lp.ln1_b.assign(static_cast<size_t>(d), S(0));
            lp.ln2_g.assign(static_cast<size_t>(d), S(1));
            lp.ln2_b.assign(static_cast<size_t>(d), S(0));
        }
        p.layers.push_back(std::move(lp));
    }
    return p;
}

template <typename S>
ParametersT<S> init_params(const ModelConfig& config, Rng& rng) {
    ParametersT<S> p = allocate_params<S>(config);
    const double scale = config.init_scale;
    for (auto& t : p.tensors()) {
        if (t.name.find(".b") != std::string::npos || t.name.find("ln") != std::string::npos)
            continue;  // biases stay zero, norm gains stay one
        for (size_t i = 0; i < t.size; ++i) t.data[i] = static_cast<S>(rng.normal() * scale);
    }
    return p;
}

template <typename S>
ParametersT<S> zeros_like(const ParametersT<S>& params) {
    return allocate_params<S>(params.config);
}

void save_checkpoint(const Parameters& params, int64_t step, const std::string& path) {
    nlohmann::ordered_json header;
    const auto& c = params.config;
    header["config"] = {{"layers", c.layers},   {"heads", c.heads},
                        {"d_model", c.d_model}, {"d_ff", c.d_ff},
                        {"vocab", c.vocab},     {"context", c.context},
                        {"norm", to_string(c.norm)}, {"init_scale", c.init_scale}};
    header["seed"] = c.seed;
    header["step"] = step;
    auto dir = nlohmann::ordered_json::array();
    size_t offset = 0;
    const auto tensors = params.tensors();
    for (const auto& t : tensors) {
        dir.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"offset", offset},
                       {"dtype", "f32"}});
        offset += t.size * sizeof(float);
    }
    header["tensors"] = std::move(dir);

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << header.dump() << "\n";
    for (const auto& t : tensors) {
        out.write(reinterpret_cast<const char*>(t.data),
                  static_cast<std::streamsize>(t.size * sizeof(float)));
    }
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    std::string header_line;
    if (!std::getline(in, header_line)) throw IoError("checkpoint missing header: " + path);
    const auto header = nlohmann::json::parse(header_line);

    ModelConfig config;
    const auto& jc = header.at("config");
    config.layers = jc.at("layers").get<int>();
    config.heads = jc.at("heads").get<int>();
    config.d_model = jc.at("d_model").get<int>();
    config.d_ff = jc.at("d_ff").get<int>();
    config.vocab = jc.at("vocab").get<int>();
    config.context = jc.at("context").get<int>();
    config.norm = norm_from_string(jc.at("norm").get<std::string>());
    config.init_scale = jc.at("init_scale").get<double>();
    config.seed = header.at("seed").get<uint64_t>();

    Checkpoint ckpt;
    ckpt.step = header.at("step").get<int64_t>();
    ckpt.params = allocate_params<float>(config);

    const auto tensors = ckpt.params.tensors();
    const auto& dir = header.at("tensors");
    if (dir.size() != tensors.size()) throw IoError("checkpoint tensor directory mismatch");
    for (size_t i = 0; i < tensors.size(); ++i) {
        if (dir[i].at("name").get<std::string>() != tensors[i].name)
            throw IoError("checkpoint tensor order mismatch at " + tensors[i].name);
        in.read(reinterpret_cast<char*>(tensors[i].data),
                static_cast<std::streamsize>(tensors[i].size * sizeof(float)));
        if (!in) throw IoError("checkpoint payload truncated at " + tensors[i].name);
    }
    return ckpt;
}

template struct ParametersT<float>;
template struct ParametersT<double>;
template ParametersT<float> allocate_params<float>(const ModelConfig&);
template ParametersT<double> allocate_params<double>(const ModelConfig&);
template ParametersT<float> init_params<float>(const ModelConfig&, Rng&);
template ParametersT<double> init_params<double>(const ModelConfig&, Rng&);
template ParametersT<float> zeros_like<float>(const ParametersT<float>&);
template ParametersT<double> zeros_like<double>(const ParametersT<double>&);
template ParametersT<double> ParametersT<float>::cast<double>() const;
template ParametersT<float> ParametersT<double>::cast<float>() const;

}  // namespace backchain::model
