#pragma once

// Recursive-descent checker for the Graphviz DOT language (graph, stmt_list,
// node/edge/attr statements, subgraphs, ports; quoted, numeral, identifier and
// HTML IDs; comments). Collects edges for semantic checks.

#include <cctype>
#include <stdexcept>
#include <string>
#include <vector>

namespace cellnas::testing {

struct DotEdge {
    std::string from, to, label;
};

struct DotGraph {
    bool directed = false;
    std::vector<std::string> nodes;  // node statements, in order
    std::vector<DotEdge> edges;
};

class DotParser {
public:
    explicit DotParser(std::string text) : s_(std::move(text)) {}

    DotGraph parse() {
        DotGraph g;
        next();
        if (keyword("strict")) next();
        if (keyword("digraph")) {
            g.directed = true;
        } else if (!keyword("graph")) {
            fail("expected graph or digraph");
        }
        next();
        if (tok_.kind == Kind::Id) next();
        expect("{");
        stmt_list(g);
        expect("}");
        if (tok_.kind != Kind::End) fail("trailing content");
        return g;
    }

private:
    enum class Kind { Id, Punct, EdgeOp, End };
    struct Tok {
        Kind kind = Kind::End;
        std::string text;
    };

    std::string s_;
    std::size_t pos_ = 0;
    Tok tok_;
    bool directed_ = false;

    [[noreturn]] void fail(const std::string& why) const {
        throw std::runtime_error("DOT syntax error near offset " + std::to_string(pos_) + ": " + why);
    }

    static bool lower_eq(const std::string& a, const char* b) {
        std::string x;
        for (char c : a) x += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return x == b;
    }
    bool keyword(const char* k) const { return tok_.kind == Kind::Id && !quoted_ && lower_eq(tok_.text, k); }
    bool punct(const char* p) const { return tok_.kind == Kind::Punct && tok_.text == p; }
    void expect(const char* p) {
        if (!punct(p)) fail(std::string("expected '") + p + "'");
        next();
    }

    bool quoted_ = false;

    void skip_space() {
        for (;;) {
            while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
            if (s_.compare(pos_, 2, "//") == 0 || (pos_ < s_.size() && s_[pos_] == '#' && at_line_start())) {
                while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
            } else if (s_.compare(pos_, 2, "/*") == 0) {
                const auto end = s_.find("*/", pos_ + 2);
                if (end == std::string::npos) fail("unterminated comment");
                pos_ = end + 2;
            } else {
                return;
            }
        }
    }
    bool at_line_start() const {
        std::size_t p = pos_;
        while (p > 0 && (s_[p - 1] == ' ' || s_[p - 1] == '\t')) --p;
        return p == 0 || s_[p - 1] == '\n';
    }

    void next() {
        skip_space();
        quoted_ = false;
        if (pos_ >= s_.size()) {
            tok_ = {Kind::End, ""};
            return;
        }
        const char c = s_[pos_];
        if (s_.compare(pos_, 2, "->") == 0 || s_.compare(pos_, 2, "--") == 0) {
            tok_ = {Kind::EdgeOp, s_.substr(pos_, 2)};
            pos_ += 2;
            return;
        }
        if (std::string("{}[];,=:").find(c) != std::string::npos) {
            tok_ = {Kind::Punct, std::string(1, c)};
            ++pos_;
            return;
        }
        if (c == '"') {
            std::string v;
            ++pos_;
            while (pos_ < s_.size() && s_[pos_] != '"') {
                if (s_[pos_] == '\\' && pos_ + 1 < s_.size()) {
                    v += s_[pos_ + 1] == '"' ? '"' : s_[pos_];
                    if (s_[pos_ + 1] != '"') v += s_[pos_ + 1];
                    pos_ += 2;
                } else {
                    v += s_[pos_++];
                }
            }
            if (pos_ >= s_.size()) fail("unterminated string");
            ++pos_;
            quoted_ = true;
            tok_ = {Kind::Id, v};
            return;
        }
        if (c == '<') {
            int depth = 0;
            const std::size_t start = pos_;
            do {
                if (pos_ >= s_.size()) fail("unterminated HTML string");
                if (s_[pos_] == '<') ++depth;
                if (s_[pos_] == '>') --depth;
                ++pos_;
            } while (depth > 0);
            quoted_ = true;
            tok_ = {Kind::Id, s_.substr(start, pos_ - start)};
            return;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_' || static_cast<unsigned char>(c) >= 0x80) {
            const std::size_t start = pos_;
            while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_' ||
                                        static_cast<unsigned char>(s_[pos_]) >= 0x80))
                ++pos_;
            tok_ = {Kind::Id, s_.substr(start, pos_ - start)};
            return;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-') {
            const std::size_t start = pos_;
            if (s_[pos_] == '-') ++pos_;
            bool digits = false, dot = false;
            while (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) || (s_[pos_] == '.' && !dot))) {
                if (s_[pos_] == '.') dot = true;
                else digits = true;
                ++pos_;
            }
            if (!digits) fail("bad numeral");
            tok_ = {Kind::Id, s_.substr(start, pos_ - start)};
            return;
        }
        fail(std::string("unexpected character '") + c + "'");
    }

    void stmt_list(DotGraph& g) {
        directed_ = g.directed;
        while (!punct("}") && tok_.kind != Kind::End) {
            stmt(g);
            if (punct(";")) next();
        }
    }

    std::string attr_list() {
        std::string label;
        while (punct("[")) {
            next();
            while (!punct("]")) {
                if (tok_.kind != Kind::Id) fail("expected attribute name");
                const std::string key = tok_.text;
                next();
                expect("=");
                if (tok_.kind != Kind::Id) fail("expected attribute value");
                if (key == "label") label = tok_.text;
                next();
                if (punct(";") || punct(",")) next();
            }
            next();
        }
        return label;
    }

    // node_id or subgraph; returns the node name ("" for a subgraph)
    std::string endpoint(DotGraph& g) {
        if (keyword("subgraph") || punct("{")) {
            subgraph(g);
            return "";
        }
        if (tok_.kind != Kind::Id) fail("expected node id");
        std::string id = tok_.text;
        next();
        if (punct(":")) {
            next();
            if (tok_.kind != Kind::Id) fail("expected port");
            next();
            if (punct(":")) {
                next();
                if (tok_.kind != Kind::Id) fail("expected compass point");
                next();
            }
        }
        return id;
    }

    void subgraph(DotGraph& g) {
        if (keyword("subgraph")) {
            next();
            if (tok_.kind == Kind::Id) next();
        }
        expect("{");
        stmt_list(g);
        expect("}");
    }

    void stmt(DotGraph& g) {
        if (keyword("graph") || keyword("node") || keyword("edge")) {
            next();
            if (!punct("[")) fail("expected attribute list");
            attr_list();
            return;
        }
        if (tok_.kind == Kind::Id && !keyword("subgraph")) {
            // ID '=' ID
            const std::size_t save_pos = pos_;
            const Tok save_tok = tok_;
            const bool save_q = quoted_;
            next();
            if (punct("=")) {
                next();
                if (tok_.kind != Kind::Id) fail("expected value");
                next();
                return;
            }
            pos_ = save_pos;
            tok_ = save_tok;
            quoted_ = save_q;
        }
        std::vector<std::string> chain{endpoint(g)};
        while (tok_.kind == Kind::EdgeOp) {
            if ((tok_.text == "->") != directed_) fail("edge operator does not match graph type");
            next();
            chain.push_back(endpoint(g));
        }
        const std::string label = attr_list();
        if (chain.size() == 1) {
            g.nodes.push_back(chain[0]);
        } else {
            for (std::size_t i = 0; i + 1 < chain.size(); ++i) g.edges.push_back({chain[i], chain[i + 1], label});
        }
    }
};

inline DotGraph parse_dot(const std::string& text) { return DotParser(text).parse(); }

}  // namespace cellnas::testing
