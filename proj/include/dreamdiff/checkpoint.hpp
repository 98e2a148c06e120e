#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamdiff/dataset.hpp"
#include "dreamdiff/normalize.hpp"
#include "dreamdiff/optim.hpp"

namespace dreamdiff {

// Self-describing binary container: version tag, JSON meta (config and
// counters), named parameter stores with shapes and raw little-endian values,
// optimizer moments, EMA shadows, and normalization statistics. Writes are
// byte-stable for identical state.
struct Checkpoint {
    static constexpr uint32_t kMagic = 0x43504444;  // "DDPC"
    static constexpr uint32_t kVersion = 1;

    struct Param {
        std::string name;
        Shape shape;
        std::vector<double> values;
    };
    struct Store {
        std::string name;
        std::vector<Param> params;
    };
    struct OptState {
        int64_t step_count = 0;
        std::vector<std::vector<double>> m, v;  // global parameter order
    };
    struct EmaState {
        double decay = 0;
        std::vector<std::vector<double>> shadow;
    };

    std::map<std::string, std::string> meta;
    std::vector<Store> stores;
    std::optional<OptState> optimizer;
    std::optional<EmaState> ema;
    std::optional<NormStats> stats;

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("checkpoint save: cannot open " + path);
        bio::write_u32(os, kMagic);
        bio::write_u32(os, kVersion);
        bio::write_str(os, nlohmann::json(meta).dump());
        bio::write_u32(os, static_cast<uint32_t>(stores.size()));
        for (const Store& s : stores) {
            bio::write_str(os, s.name);
            bio::write_u32(os, static_cast<uint32_t>(s.params.size()));
            for (const Param& p : s.params) {
                bio::write_str(os, p.name);
                bio::write_u32(os, static_cast<uint32_t>(p.shape.size()));
                for (int d : p.shape) bio::write_i32(os, d);
                bio::write_f64v(os, p.values);
            }
        }
        bio::write_u32(os, optimizer ? 1u : 0u);
        if (optimizer) {
            bio::write_u64(os, static_cast<uint64_t>(optimizer->step_count));
            for (const auto& m : optimizer->m) bio::write_f64v(os, m);
            for (const auto& v : optimizer->v) bio::write_f64v(os, v);
        }
        bio::write_u32(os, ema ? 1u : 0u);
        if (ema) {
            bio::write_f64(os, ema->decay);
            for (const auto& sh : ema->shadow) bio::write_f64v(os, sh);
        }
        bio::write_u32(os, stats ? 1u : 0u);
        if (stats) {
            bio::write_f64(os, stats->point_min[0]);
            bio::write_f64(os, stats->point_min[1]);
            bio::write_f64(os, stats->point_max[0]);
            bio::write_f64(os, stats->point_max[1]);
            bio::write_f64v(os, stats->prop_min);
            bio::write_f64v(os, stats->prop_max);
            bio::write_f64v(os, stats->act_min);
            bio::write_f64v(os, stats->act_max);
        }
        if (!os) throw std::runtime_error("checkpoint save: write failed for " + path);
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("checkpoint load: cannot open " + path);
        if (bio::read_u32(is) != kMagic) throw std::runtime_error("checkpoint load: bad magic in " + path);
        uint32_t ver = bio::read_u32(is);
        if (ver != kVersion) throw std::runtime_error("checkpoint load: unsupported version " + std::to_string(ver));
        Checkpoint c;
        auto meta_json = nlohmann::json::parse(bio::read_str(is));
        for (auto it = meta_json.begin(); it != meta_json.end(); ++it)
            c.meta[it.key()] = it.value().get<std::string>();
        uint32_t n_stores = bio::read_u32(is);
        size_t total_params = 0;
        c.stores.resize(n_stores);
        for (Store& s : c.stores) {
            s.name = bio::read_str(is);
            uint32_t n_params = bio::read_u32(is);
            s.params.resize(n_params);
            total_params += n_params;
            for (Param& p : s.params) {
                p.name = bio::read_str(is);
                uint32_t rank = bio::read_u32(is);
                p.shape.resize(rank);
                for (uint32_t d = 0; d < rank; ++d) p.shape[d] = bio::read_i32(is);
                p.values = bio::read_f64v(is);
            }
        }
        if (bio::read_u32(is)) {
            OptState o;
            o.step_count = static_cast<int64_t>(bio::read_u64(is));
            o.m.resize(total_params);
            o.v.resize(total_params);
            for (auto& m : o.m) m = bio::read_f64v(is);
            for (auto& v : o.v) v = bio::read_f64v(is);
            c.optimizer = std::move(o);
        }
        if (bio::read_u32(is)) {
            EmaState e;
            e.decay = bio::read_f64(is);
            e.shadow.resize(total_params);
            for (auto& sh : e.shadow) sh = bio::read_f64v(is);
            c.ema = std::move(e);
        }
        if (bio::read_u32(is)) {
            NormStats st;
            st.point_min[0] = bio::read_f64(is);
            st.point_min[1] = bio::read_f64(is);
            st.point_max[0] = bio::read_f64(is);
            st.point_max[1] = bio::read_f64(is);
            st.prop_min = bio::read_f64v(is);
            st.prop_max = bio::read_f64v(is);
            st.act_min = bio::read_f64v(is);
            st.act_max = bio::read_f64v(is);
            c.stats = st;
        }
        if (!is) throw std::runtime_error("checkpoint load: truncated file " + path);
        return c;
    }

    static Store snapshot(const ParameterStore& ps) {
        Store s;
        s.name = ps.name();
        s.params.reserve(ps.size());
        for (size_t i = 0; i < ps.size(); ++i) {
            const Tensor& t = ps.param(i);
            std::vector<double> vals(t.data().begin(), t.data().end());
            s.params.push_back({ps.param_name(i), t.shape(), std::move(vals)});
        }
        return s;
    }

    // copy values into an existing (identically constructed) store by name
    static void restore(const Store& s, ParameterStore& ps) {
        if (s.params.size() != ps.size())
            throw std::runtime_error("checkpoint restore: store " + s.name + " has " +
                                     std::to_string(s.params.size()) + " params, model expects " +
                                     std::to_string(ps.size()));
        for (const Param& p : s.params) {
            Tensor t = ps.get(p.name);
            if (t.shape() != p.shape)
                throw std::runtime_error("checkpoint restore: shape mismatch on " + p.name + ": file " +
                                         shape_str(p.shape) + " vs model " + shape_str(t.shape()));
            for (size_t i = 0; i < p.values.size(); ++i) t.data()[i] = static_cast<scalar>(p.values[i]);
        }
    }

    int meta_int(const std::string& key) const { return std::stoi(meta.at(key)); }
    double meta_double(const std::string& key) const { return std::stod(meta.at(key)); }
    std::string meta_str(const std::string& key) const { return meta.at(key); }
    bool has_meta(const std::string& key) const { return meta.count(key) != 0; }
};

}  // namespace dreamdiff
