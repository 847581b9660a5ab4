#include "moekit/checkpoint.hpp"

#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace moekit {

namespace {

void write_raw(const fs::path & path, const float * data, size_t n) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw input_error("cannot write " + path.string());
    f.write(reinterpret_cast<const char *>(data), static_cast<std::streamsize>(n * sizeof(float)));
    if (!f) throw input_error("short write on " + path.string());
}

void read_raw(const fs::path & path, float * data, size_t n) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw input_error("cannot read " + path.string());
    f.read(reinterpret_cast<char *>(data), static_cast<std::streamsize>(n * sizeof(float)));
    if (static_cast<size_t>(f.gcount()) != n * sizeof(float))
        throw input_error("truncated parameter file " + path.string());
}

void save_store_arrays(const fs::path & dir, const ParamStore<float> & store) {
    nlohmann::json manifest;
    auto params = nlohmann::json::array();
    for (const auto & e : store.entries()) {
        const std::string file = e.name + ".f32";
        params.push_back({{"name", e.name},
                          {"rows", e.rows},
                          {"cols", e.cols},
                          {"frozen", e.frozen},
                          {"file", file}});
        write_raw(dir / file, store.raw().data() + e.offset,
                  static_cast<size_t>(e.rows) * static_cast<size_t>(e.cols));
    }
    manifest["params"] = params;
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

} // namespace

void save_checkpoint(const std::string & dir_s, const System<float> & sys, const TrainState * state) {
    const fs::path dir(dir_s);
    fs::create_directories(dir);
    {
        std::ofstream cf(dir / "config.json");
        if (!cf) throw input_error("cannot write checkpoint config in " + dir_s);
        cf << sys.cfg.to_json() << "\n";
    }
    save_store_arrays(dir, sys.store);
    if (state) {
        const fs::path odir = dir / "optim";
        fs::create_directories(odir);
        write_raw(odir / "adam_m.f32", state->adam_m.data(), state->adam_m.size());
        write_raw(odir / "adam_v.f32", state->adam_v.data(), state->adam_v.size());
        nlohmann::json j;
        j["step"] = state->step;
        j["n_params"] = state->adam_m.size();
        std::ofstream sf(odir / "state.json");
        sf << j.dump(2) << "\n";
    }
}

LoadedCheckpoint load_checkpoint_into(const std::string & dir_s, std::unique_ptr<System<float>> & sys) {
    const fs::path dir(dir_s);
    std::ifstream cf(dir / "config.json");
    if (!cf) throw input_error("no checkpoint config at " + dir_s);
    std::string cfg_text((std::istreambuf_iterator<char>(cf)), std::istreambuf_iterator<char>());

    LoadedCheckpoint out;
    out.config = SystemConfig::from_json(cfg_text);
    sys = std::make_unique<System<float>>(out.config, /*seed=*/0);

    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw input_error("no manifest.json at " + dir_s);
    nlohmann::json manifest;
    mf >> manifest;
    for (const auto & p : manifest.at("params")) {
        const std::string name = p.at("name").get<std::string>();
        const int idx = sys->store.find(name);
        if (idx < 0) throw input_error("checkpoint parameter " + name + " not in model");
        const auto & e = sys->store.entries()[static_cast<size_t>(idx)];
        if (e.rows != p.at("rows").get<int>() || e.cols != p.at("cols").get<int>())
            throw input_error("checkpoint parameter " + name + " has wrong shape");
        read_raw(dir / p.at("file").get<std::string>(), sys->store.raw().data() + e.offset,
                 static_cast<size_t>(e.rows) * static_cast<size_t>(e.cols));
    }

    const fs::path odir = dir / "optim";
    if (fs::exists(odir / "state.json")) {
        std::ifstream sf(odir / "state.json");
        nlohmann::json j;
        sf >> j;
        TrainState st;
        st.step = j.at("step").get<long>();
        const size_t n = j.at("n_params").get<size_t>();
        st.adam_m.resize(n);
        st.adam_v.resize(n);
        read_raw(odir / "adam_m.f32", st.adam_m.data(), n);
        read_raw(odir / "adam_v.f32", st.adam_v.data(), n);
        out.state = std::move(st);
    }
    return out;
}

} // namespace moekit
