from flask import Flask, request, jsonify
from flask_cors import CORS
from datetime import datetime
import logging
import uuid

import numpy as np

from config import Config
from vrclf import schema
from vrclf.errors import SchemaError, VRCLFError
from vrclf.feasibility import Infeasible, feasible_interval, select_u
from vrclf.gain_calculus import check_small_gain, default_grid

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Initialize Flask app
app = Flask(__name__)
app.config.from_object(Config)
CORS(app)

# Installed feedback law and its metadata
served = {"law": None, "meta": {}}

# Recent evaluations
history = []
HISTORY_SIZE = 50


def install_law(law, meta=None):
    """Serve `law` on /api/feedback; anything callable on a state vector works"""
    served["law"] = law
    served["meta"] = {"installed": datetime.now().isoformat(), **(meta or {})}
    logger.info(f"Installed feedback law {served['meta']}")


def _remember(entry):
    history.append(entry)
    del history[:-HISTORY_SIZE]


# ============================================
# API Routes - Feedback
# ============================================

@app.route('/api/health')
def api_health():
    return jsonify({
        'status': 'ok',
        'law_installed': served['law'] is not None,
        'schema_version': schema.SCHEMA_VERSION,
    })


@app.route('/api/law')
def api_law():
    if served['law'] is None:
        return jsonify({'error': 'No feedback law installed'}), 503
    return jsonify(served['meta'])


@app.route('/api/feedback', methods=['POST'])
def api_feedback():
    """Evaluate the installed law at one state {"x": [...]}"""
    law = served['law']
    if law is None:
        return jsonify({'error': 'No feedback law installed'}), 503
    try:
        data = request.get_json(silent=True) or {}
        x = data.get('x')
        if not isinstance(x, list) or not x:
            return jsonify({'error': 'Body must carry a non-empty state list "x"'}), 400
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            return jsonify({'error': 'State must be finite'}), 400

        result = {'request_id': str(uuid.uuid4()), 'x': x.tolist(), 'u': float(law(x))}
        if hasattr(law, 'region'):
            result['region'] = law.region(x)
        _remember({'timestamp': datetime.now().isoformat(), **result})
        return jsonify(result)

    except (TypeError, ValueError) as e:
        return jsonify({'error': f'Invalid state: {e}'}), 400
    except VRCLFError as e:
        logger.error(f"Feedback error: {e}")
        return jsonify({'error': str(e), **e.to_dict()}), 422
    except Exception as e:
        logger.error(f"Feedback error: {e}")
        return jsonify({'error': str(e)}), 500


@app.route('/api/history')
def api_history():
    """Most recent feedback evaluations"""
    return jsonify({'evaluations': history[-10:]})


# ============================================
# API Routes - Checks
# ============================================

@app.route('/api/smallgain', methods=['POST'])
def api_smallgain():
    try:
        G = schema.read_gains(request.get_json(silent=True) or {})
        grid = default_grid(Config.SMALL_GAIN_GRID_POINTS, Config.SMALL_GAIN_GRID_MIN, Config.SMALL_GAIN_GRID_MAX)
        report = check_small_gain(G, grid, Config.MAX_CYCLE_K)
        return jsonify(report.to_dict())

    except SchemaError as e:
        return jsonify({'error': str(e), **e.to_dict()}), 400
    except VRCLFError as e:
        logger.error(f"Small-gain error: {e}")
        return jsonify({'error': str(e), **e.to_dict()}), 422
    except Exception as e:
        logger.error(f"Small-gain error: {e}")
        return jsonify({'error': str(e)}), 500


@app.route('/api/feascheck', methods=['POST'])
def api_feascheck():
    try:
        constraints, control_set = schema.read_constraints(request.get_json(silent=True) or {})
        result = feasible_interval(constraints, control_set)
        body = result.to_dict()
        if isinstance(result, Infeasible):
            body['witness'] = [i + 1 for i in result.witness]
        else:
            body['u'] = select_u(result, control_set)
        return jsonify(body)

    except SchemaError as e:
        return jsonify({'error': str(e), **e.to_dict()}), 400
    except VRCLFError as e:
        logger.error(f"Feasibility error: {e}")
        return jsonify({'error': str(e), **e.to_dict()}), 422
    except Exception as e:
        logger.error(f"Feasibility error: {e}")
        return jsonify({'error': str(e)}), 500


# ============================================
# Error Handlers
# ============================================

@app.errorhandler(404)
def not_found(error):
    return jsonify({'error': 'Not found'}), 404


@app.errorhandler(500)
def internal_error(error):
    return jsonify({'error': 'Internal server error'}), 500


# ============================================
# Main Entry Point
# ============================================

# Production: gunicorn app:app (see Procfile)
if __name__ == '__main__':
    app.run(host=Config.HOST, port=Config.PORT, debug=False)
