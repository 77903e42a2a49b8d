#pragma once

#include "jinsect/spin_core.hpp"

#include <json.hpp>

#include <fstream>
#include <optional>
#include <utility>

namespace jinsect {

// gamma / 2pi in MHz/T
inline const std::map<std::string, double>& default_gammas_mhz() {
    static const std::map<std::string, double> table{{"H", 42.577}, {"C13", 10.7084}, {"F19", 40.052}};
    return table;
}

struct Nucleus {
    std::string label;
    std::string species;
    double gamma = 0;  // rad s^-1 T^-1
    double shift = 0;  // rad/s
    std::optional<std::string> equivalence_group;
};

struct Molecule {
    std::string name;
    std::vector<Nucleus> nuclei;
    Eigen::MatrixXd j_matrix;  // rad/s, symmetric, zero diagonal
    // Parameter label -> pairs sharing that coupling constant.
    std::map<std::string, std::vector<std::pair<int, int>>> coupling_labels;

    int size() const { return int(nuclei.size()); }

    int index_of(const std::string& label) const {
        for (int i = 0; i < size(); ++i)
            if (nuclei[i].label == label) return i;
        throw std::invalid_argument("unknown nucleus '" + label + "'");
    }

    std::vector<std::string> site_species() const {
        std::vector<std::string> s;
        for (const auto& n : nuclei) s.push_back(n.species);
        return s;
    }

    std::set<std::string> species() const {
        std::set<std::string> s;
        for (const auto& n : nuclei) s.insert(n.species);
        return s;
    }

    bool has_species(const std::string& sp) const { return species().count(sp) > 0; }

    std::vector<int> sites_of(const std::string& sp) const {
        std::vector<int> v;
        for (int i = 0; i < size(); ++i)
            if (nuclei[i].species == sp) v.push_back(i);
        return v;
    }

    double gamma_of(const std::string& sp) const {
        for (const auto& n : nuclei)
            if (n.species == sp) return n.gamma;
        throw std::invalid_argument("unknown species '" + sp + "'");
    }

    int n_hydrogen() const { return int(sites_of("H").size()); }

    bool equivalent(int i, int j) const {
        return i != j && nuclei[i].equivalence_group && nuclei[j].equivalence_group &&
               *nuclei[i].equivalence_group == *nuclei[j].equivalence_group;
    }

    std::string label_of(int i, int j) const {
        for (const auto& [name, pairs] : coupling_labels)
            for (auto [a, b] : pairs)
                if ((a == i && b == j) || (a == j && b == i)) return name;
        return "J_" + nuclei[std::min(i, j)].label + "_" + nuclei[std::max(i, j)].label;
    }

    void set_coupling(int i, int j, double value) {
        j_matrix(i, j) = j_matrix(j, i) = value;
    }

    // Sets every pair carrying this label, value in rad/s.
    void set_labelled_coupling(const std::string& label, double value) {
        auto it = coupling_labels.find(label);
        if (it == coupling_labels.end()) throw std::invalid_argument("unknown coupling label '" + label + "'");
        for (auto [a, b] : it->second) set_coupling(a, b, value);
    }

    double labelled_coupling(const std::string& label) const {
        auto it = coupling_labels.find(label);
        if (it == coupling_labels.end() || it->second.empty())
            throw std::invalid_argument("unknown coupling label '" + label + "'");
        return j_matrix(it->second.front().first, it->second.front().second);
    }

    ThermalParams thermal_params(double B_ext, double temperature) const {
        ThermalParams p{B_ext, temperature, {}};
        for (const auto& n : nuclei) p.gamma[n.species] = n.gamma;
        return p;
    }

    void validate() const {
        const int n = size();
        if (n < 1 || n > 12) throw std::invalid_argument("molecule must have 1..12 nuclei");
        if (j_matrix.rows() != n || j_matrix.cols() != n) throw std::invalid_argument("J matrix size mismatch");
        for (int i = 0; i < n; ++i) {
            if (nuclei[i].gamma == 0) throw std::invalid_argument("nucleus '" + nuclei[i].label + "' has zero gamma");
            if (j_matrix(i, i) != 0) throw std::invalid_argument("J matrix diagonal must be zero");
            for (int k = 0; k < n; ++k) {
                if (j_matrix(i, k) != j_matrix(k, i)) throw std::invalid_argument("J matrix must be symmetric");
                if (equivalent(i, k) &&
                    (nuclei[i].species != nuclei[k].species || nuclei[i].shift != nuclei[k].shift))
                    throw std::invalid_argument("equivalent nuclei must share species and shift");
            }
        }
        for (const auto& [name, pairs] : coupling_labels)
            for (auto [a, b] : pairs) {
                if (a < 0 || b < 0 || a >= n || b >= n || a == b)
                    throw std::invalid_argument("bad pair for coupling label '" + name + "'");
                if (j_matrix(a, b) != labelled_coupling(name))
                    throw std::invalid_argument("pairs under label '" + name + "' disagree");
            }
    }
};

struct HamiltonianModel {
    bool full_dot_homonuclear = true;
    bool zz_heteronuclear = true;
    bool zz_all = false;
    bool include_shifts = true;

    static HamiltonianModel full() { return {true, true, false, true}; }
    static HamiltonianModel zz() { return {false, true, true, true}; }

    void validate() const {
        if (full_dot_homonuclear == zz_all)
            throw std::invalid_argument("select exactly one of full_dot_homonuclear and zz_all");
    }
};

inline bool is_hydrogen(const Nucleus& n) { return n.species == "H"; }

// Sum_i delta_i S^z_i + homonuclear J S.S (or ZZ) + heteronuclear ZZ.
inline Mat simulation_hamiltonian_matrix(const Molecule& mol, const HamiltonianModel& model) {
    model.validate();
    const int n = mol.size();
    const Eigen::Index dim = Eigen::Index(1) << n;
    std::vector<Eigen::VectorXd> zd;
    for (int k = 0; k < n; ++k) zd.push_back(site_z_diagonal(n, k));
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(dim);
    Mat h = Mat::Zero(dim, dim);
    if (model.include_shifts)
        for (int k = 0; k < n; ++k) diag += mol.nuclei[k].shift * zd[k];
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double J = mol.j_matrix(i, j);
            if (J == 0) continue;
            const bool homo = mol.nuclei[i].species == mol.nuclei[j].species;
            if (homo && model.full_dot_homonuclear) {
                // J (S^z S^z + (S^+ S^- + S^- S^+)/2): flip-flop on anti-aligned pairs.
                diag += J * zd[i].cwiseProduct(zd[j]);
                const Eigen::Index bi = Eigen::Index(1) << (n - 1 - i);
                const Eigen::Index bj = Eigen::Index(1) << (n - 1 - j);
                for (Eigen::Index b = 0; b < dim; ++b)
                    if (bool(b & bi) != bool(b & bj)) h(b ^ bi ^ bj, b) += 0.5 * J;
            } else if (homo || model.zz_all || model.zz_heteronuclear) {
                diag += J * zd[i].cwiseProduct(zd[j]);
            }
        }
    h.diagonal() += diag.cast<cplx>();
    return h;
}

inline OperatorMatrix simulation_hamiltonian(const Molecule& mol, const HamiltonianModel& model) {
    return OperatorMatrix(simulation_hamiltonian_matrix(mol, model), true);
}

// Diagonal generator of the ideal encoding: H-H pairs outside an equivalence group,
// plus H-A pairs for targeted species A.
inline Eigen::VectorXd encoding_generator_diagonal(const Molecule& mol, const std::set<std::string>& targeted) {
    const int n = mol.size();
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(Eigen::Index(1) << n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            const double J = mol.j_matrix(i, j);
            if (J == 0) continue;
            const bool hi = is_hydrogen(mol.nuclei[i]), hj = is_hydrogen(mol.nuclei[j]);
            bool keep = false;
            if (hi && hj) keep = !mol.equivalent(i, j);
            else if (hi) keep = targeted.count(mol.nuclei[j].species) > 0;
            else if (hj) keep = targeted.count(mol.nuclei[i].species) > 0;
            if (keep) diag += J * site_z_diagonal(n, i).cwiseProduct(site_z_diagonal(n, j));
        }
    return diag;
}

inline OperatorMatrix encoding_propagator_homo(const Molecule& mol, double t) {
    if (t < 0) throw std::invalid_argument("t must be non-negative");
    return OperatorMatrix(diagonal_unitary(encoding_generator_diagonal(mol, {"H"}), t), false);
}

inline OperatorMatrix encoding_propagator_hetero(const Molecule& mol, double t,
                                                 const std::set<std::string>& targeted) {
    if (!targeted.count("H")) throw std::invalid_argument("targeted species must include H");
    if (t < 0) throw std::invalid_argument("t must be non-negative");
    return OperatorMatrix(diagonal_unitary(encoding_generator_diagonal(mol, targeted), t), false);
}

inline DensityMatrix thermal_state(const Molecule& mol, const ThermalParams& params,
                                   const std::set<std::string>& x_polarized) {
    for (const auto& s : x_polarized)
        if (!mol.has_species(s)) throw std::invalid_argument("unknown species '" + s + "'");
    return thermal_state(mol.site_species(), params, x_polarized);
}

// Fully x-polarized H, (I + sigma_x)/2, other nuclei maximally mixed.
inline Mat polarized_hydrogen_state(const Molecule& mol) {
    std::vector<Eigen::Matrix2cd> factors;
    for (const auto& n : mol.nuclei) {
        Eigen::Matrix2cd r = 0.5 * Eigen::Matrix2cd::Identity();
        if (is_hydrogen(n)) r(0, 1) = r(1, 0) = 0.5;
        factors.push_back(r);
    }
    return product_state(factors);
}

// ---------------------------------------------------------------------------
// JSON description: gamma in MHz/T, shifts and J in Hz.

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                                const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) throw std::invalid_argument(where + ": unknown key '" + it.key() + "'");
}

inline Molecule molecule_from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, {"name", "nuclei", "couplings"}, "molecule");
    Molecule m;
    m.name = j.value("name", "");
    if (!j.contains("nuclei") || !j.at("nuclei").is_array()) throw std::invalid_argument("molecule: missing 'nuclei'");
    int idx = 0;
    for (const auto& nj : j.at("nuclei")) {
        const std::string where = "molecule.nuclei[" + std::to_string(idx++) + "]";
        reject_unknown_keys(nj, {"label", "species", "gamma_mhz_per_t", "shift_hz", "equivalence_group"}, where);
        Nucleus n;
        n.label = nj.at("label").get<std::string>();
        n.species = nj.at("species").get<std::string>();
        double g_mhz;
        if (nj.contains("gamma_mhz_per_t")) g_mhz = nj.at("gamma_mhz_per_t").get<double>();
        else {
            auto it = default_gammas_mhz().find(n.species);
            if (it == default_gammas_mhz().end())
                throw std::invalid_argument(where + ": no default gamma for species '" + n.species + "'");
            g_mhz = it->second;
        }
        n.gamma = two_pi * g_mhz * 1e6;
        n.shift = two_pi * nj.value("shift_hz", 0.0);
        if (nj.contains("equivalence_group")) n.equivalence_group = nj.at("equivalence_group").get<std::string>();
        m.nuclei.push_back(n);
    }
    m.j_matrix = Eigen::MatrixXd::Zero(m.size(), m.size());
    idx = 0;
    for (const auto& cj : j.value("couplings", nlohmann::json::array())) {
        const std::string where = "molecule.couplings[" + std::to_string(idx++) + "]";
        reject_unknown_keys(cj, {"a", "b", "j_hz", "label"}, where);
        const int a = m.index_of(cj.at("a").get<std::string>());
        const int b = m.index_of(cj.at("b").get<std::string>());
        if (a == b) throw std::invalid_argument(where + ": self coupling");
        m.set_coupling(a, b, two_pi * cj.at("j_hz").get<double>());
        if (cj.contains("label")) m.coupling_labels[cj.at("label").get<std::string>()].push_back({a, b});
    }
    m.validate();
    return m;
}

inline nlohmann::json molecule_to_json(const Molecule& m) {
    nlohmann::json j;
    j["name"] = m.name;
    j["nuclei"] = nlohmann::json::array();
    for (const auto& n : m.nuclei) {
        nlohmann::json nj;
        nj["label"] = n.label;
        nj["species"] = n.species;
        nj["gamma_mhz_per_t"] = n.gamma / two_pi / 1e6;
        nj["shift_hz"] = n.shift / two_pi;
        if (n.equivalence_group) nj["equivalence_group"] = *n.equivalence_group;
        j["nuclei"].push_back(nj);
    }
    j["couplings"] = nlohmann::json::array();
    for (int a = 0; a < m.size(); ++a)
        for (int b = a + 1; b < m.size(); ++b) {
            if (m.j_matrix(a, b) == 0) continue;
            nlohmann::json cj{{"a", m.nuclei[a].label}, {"b", m.nuclei[b].label}, {"j_hz", m.j_matrix(a, b) / two_pi}};
            for (const auto& [name, pairs] : m.coupling_labels)
                for (auto [p, q] : pairs)
                    if ((p == a && q == b) || (p == b && q == a)) cj["label"] = name;
            j["couplings"].push_back(cj);
        }
    return j;
}

inline Molecule load_molecule(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open molecule file '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
    return molecule_from_json(j);
}

// Fluoromethanol: two equivalent H_a, one H_b, one 13C, one 19F.
inline Molecule fluoromethanol() {
    static const char* text = R"({
      "name": "fluoromethanol",
      "nuclei": [
        {"label": "Ha1", "species": "H", "shift_hz": 512, "equivalence_group": "Ha"},
        {"label": "Ha2", "species": "H", "shift_hz": 512, "equivalence_group": "Ha"},
        {"label": "Hb", "species": "H", "shift_hz": 236},
        {"label": "C", "species": "C13", "shift_hz": 85},
        {"label": "F", "species": "F19", "shift_hz": 450}
      ],
      "couplings": [
        {"a": "Ha1", "b": "Hb", "j_hz": 8, "label": "J"},
        {"a": "Ha2", "b": "Hb", "j_hz": 8, "label": "J"},
        {"a": "Ha1", "b": "C", "j_hz": 130, "label": "J1"},
        {"a": "Ha2", "b": "C", "j_hz": 130, "label": "J1"},
        {"a": "Hb", "b": "C", "j_hz": 6, "label": "J2"},
        {"a": "Ha1", "b": "F", "j_hz": 80, "label": "J1F"},
        {"a": "Ha2", "b": "F", "j_hz": 80, "label": "J1F"},
        {"a": "Hb", "b": "F", "j_hz": 4, "label": "J2F"},
        {"a": "C", "b": "F", "j_hz": 160, "label": "JCF"}
      ]
    })";
    return molecule_from_json(nlohmann::json::parse(text));
}

}  // namespace jinsect
